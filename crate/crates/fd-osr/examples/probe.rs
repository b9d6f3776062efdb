//! Scratch probe: which factor blocks rotation learning in the decoupled
//! training loop (dropout, step balance, learning rate).
extern crate blas_src;
use fd_osr::data::{load_dataset, pad_and_normalize, DatasetSpec};
use fd_osr::network::{batch_images, EncoderConfig, ModelState, OptSlot, ParamGroup};
use fd_osr::pretrain::{content_backward, transform_backward};
use fd_osr::transforms::rotation_family;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run(name: &str, originals: &[(u32, ndarray::Array2<f32>)], dropout_keep: f64, t_steps: usize, t_lr: f32, epochs: usize) {
    let family = rotation_family();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cfg = EncoderConfig::standard(6, 3, 6);
    cfg.dropout_keep = dropout_keep;
    let mut model = ModelState::<f32>::new(cfg, &mut rng).unwrap();
    let mut order: Vec<usize> = (0..originals.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let (mut cs, mut ts, mut nb) = (0.0, 0.0, 0);
        for chunk in order.chunks(64) {
            let batch: Vec<_> = chunk.iter().map(|&i| originals[i].clone()).collect();
            let expanded = family.expand_batch(&batch);
            let views = batch_images(&expanded.iter().map(|(v, _)| v.pixels.clone()).collect::<Vec<_>>());
            let targets = batch_images(&expanded.iter().map(|(_, t)| (*t).clone()).collect::<Vec<_>>());
            let labels: Vec<usize> = expanded.iter().map(|(v, _)| v.transform_label).collect();
            let closs = content_backward(&mut model, &views, &targets, &mut rng);
            model.adam_update(&[ParamGroup::Encoder, ParamGroup::Decoder], 0.001);
            let mut tloss = 0.0;
            for _ in 0..t_steps {
                tloss = transform_backward(&mut model, &views, &labels, &mut rng);
                model.adam_update_slot(&[ParamGroup::Encoder, ParamGroup::THead], t_lr, OptSlot::Secondary);
            }
            cs += closs as f64; ts += tloss as f64; nb += 1;
        }
        println!("{name} epoch {epoch} c {:.3} t {:.4}", cs / nb as f64, ts / nb as f64);
    }
}

fn main() {
    let spec = DatasetSpec::fashion_mnist();
    let ds = load_dataset(&spec, std::path::Path::new("data/fashion-mnist")).unwrap();
    let originals: Vec<(u32, ndarray::Array2<f32>)> = ds.train[..2000]
        .iter()
        .map(|img| (img.sample_id, pad_and_normalize(img, &spec).unwrap()))
        .collect();
    run("nodrop", &originals, 1.0, 1, 0.001, 4);
    run("2tsteps", &originals, 0.2, 2, 0.001, 4);
    run("tlr3x", &originals, 0.2, 1, 0.003, 4);
}
