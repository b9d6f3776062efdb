//! Binary checkpoints: a JSON header describing the model followed by raw
//! little-endian f32 tensor data. Saving and reloading is bit-exact, and
//! optimizer moments plus batch-norm running statistics ride along so a
//! resumed run continues the same trajectory.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{EncoderConfig, ModelState};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FDOSRCK1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// "param" entries carry value + Adam (m, v) for both optimizer
    /// slots; "buffer" entries carry a single array (batch-norm running
    /// statistics).
    kind: String,
    /// Adam update counts for "param" entries, one per optimizer slot.
    #[serde(default)]
    steps: [u64; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    step: u64,
    config: EncoderConfig,
    tensors: Vec<TensorEntry>,
}

fn write_array(w: &mut impl Write, a: &ArrayD<f32>) -> Result<()> {
    for &v in a.iter() {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_array(r: &mut impl Read, shape: &[usize]) -> Result<ArrayD<f32>> {
    let len: usize = shape.iter().product();
    let mut buf = vec![0f32; len];
    r.read_f32_into::<LittleEndian>(&mut buf)?;
    ArrayD::from_shape_vec(IxDyn(shape), buf)
        .map_err(|e| Error::Checkpoint(format!("bad tensor shape: {e}")))
}

pub fn save(model: &mut ModelState<f32>, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<ArrayD<f32>> = Vec::new();
    model.for_each_param(&mut |p| {
        entries.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            kind: "param".into(),
            steps: [p.opt[0].t, p.opt[1].t],
        });
        payload.push(p.value.clone());
        for st in &p.opt {
            payload.push(st.m.clone());
            payload.push(st.v.clone());
        }
    });
    for (i, bn) in model.encoder.batchnorms_mut().into_iter().enumerate() {
        for (suffix, arr) in [("running_mean", &bn.running_mean), ("running_var", &bn.running_var)]
        {
            entries.push(TensorEntry {
                name: format!("enc.bn{i}.{suffix}"),
                shape: vec![arr.len()],
                kind: "buffer".into(),
                steps: [0, 0],
            });
            payload.push(arr.clone().into_dyn());
        }
    }
    let header = Header {
        version: 2,
        step: model.step,
        config: model.cfg.clone(),
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u64::<LittleEndian>(header_json.len() as u64)?;
    w.write_all(&header_json)?;
    for a in &payload {
        write_array(&mut w, a)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelState<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let header_len = r.read_u64::<LittleEndian>()? as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)?;
    if header.version != 2 {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            header.version
        )));
    }

    // params are seeded then overwritten, so the seed value is irrelevant
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    use rand::SeedableRng;
    let mut model = ModelState::<f32>::new(header.config.clone(), &mut rng)?;
    model.step = header.step;

    for entry in &header.tensors {
        match entry.kind.as_str() {
            "param" => {
                let value = read_array(&mut r, &entry.shape)?;
                let mut moments = Vec::with_capacity(4);
                for _ in 0..4 {
                    moments.push(read_array(&mut r, &entry.shape)?);
                }
                let mut found = false;
                model.for_each_param(&mut |p| {
                    if p.name == entry.name {
                        if p.value.shape() != entry.shape.as_slice() {
                            return; // shape mismatch caught below via `found`
                        }
                        p.value.assign(&value);
                        for (i, st) in p.opt.iter_mut().enumerate() {
                            st.m.assign(&moments[2 * i]);
                            st.v.assign(&moments[2 * i + 1]);
                            st.t = entry.steps[i];
                        }
                        found = true;
                    }
                });
                if !found {
                    return Err(Error::Checkpoint(format!(
                        "unknown or mismatched parameter '{}'",
                        entry.name
                    )));
                }
            }
            "buffer" => {
                let value = read_array(&mut r, &entry.shape)?;
                let value1 = value
                    .into_dimensionality::<ndarray::Ix1>()
                    .map_err(|e| Error::Checkpoint(format!("buffer shape: {e}")))?;
                let mut found = false;
                for (i, bn) in model.encoder.batchnorms_mut().into_iter().enumerate() {
                    if entry.name == format!("enc.bn{i}.running_mean") {
                        bn.running_mean.assign(&value1);
                        found = true;
                    } else if entry.name == format!("enc.bn{i}.running_var") {
                        bn.running_var.assign(&value1);
                        found = true;
                    }
                    if found {
                        break;
                    }
                }
                if !found {
                    return Err(Error::Checkpoint(format!(
                        "unknown buffer '{}'",
                        entry.name
                    )));
                }
            }
            other => {
                return Err(Error::Checkpoint(format!("unknown tensor kind '{other}'")));
            }
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::layers::Mode;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut model = ModelState::<f32>::new(EncoderConfig::tiny(), &mut rng).unwrap();
        // run a forward pass in train mode so running stats move off init
        let x = Array4::<f32>::from_shape_simple_fn((4, 1, 8, 8), || rand::Rng::gen_range(&mut rng, 0.0..1.0));
        let _ = model.encode(&x, Mode::Train, &mut rng);
        // perturb moments in both optimizer slots so they are checked too
        model.for_each_param(&mut |p| {
            for (i, st) in p.opt.iter_mut().enumerate() {
                st.m.fill(0.25 + i as f32);
                st.v.fill(0.5 + i as f32);
                st.t = 9 + i as u64;
            }
        });
        model.step = 17;

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&mut model, &path).unwrap();
        let mut loaded = load(&path).unwrap();

        assert_eq!(loaded.step, 17);
        assert_eq!(loaded.cfg, model.cfg);
        let mut orig = Vec::new();
        model.for_each_param(&mut |p| {
            orig.push((p.name.clone(), p.value.clone(), p.opt.to_vec()))
        });
        let mut re = Vec::new();
        loaded.for_each_param(&mut |p| {
            re.push((p.name.clone(), p.value.clone(), p.opt.to_vec()))
        });
        assert_eq!(orig, re);
        for (a, b) in model
            .encoder
            .batchnorms_mut()
            .into_iter()
            .zip(loaded.encoder.batchnorms_mut())
        {
            assert_eq!(a.running_mean, b.running_mean);
            assert_eq!(a.running_var, b.running_var);
        }
    }

    #[test]
    fn rejects_non_checkpoint_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load(&path).is_err());
    }
}
