//! The transformation module: a family of deterministic input
//! transformations whose indices double as pretext-task labels.
//!
//! Only the 90-degree rotation family ships here; the interface is kept
//! generic so other families (e.g. graph transformations) can plug in.

use ndarray::Array2;

use crate::error::{Error, Result};

type TransformFn = fn(&Array2<f32>) -> Array2<f32>;

pub struct TransformationFamily {
    pub name: String,
    descriptors: Vec<String>,
    transforms: Vec<TransformFn>,
}

#[derive(Debug, Clone)]
pub struct TransformedView {
    pub pixels: Array2<f32>,
    pub transform_label: usize,
    pub source_id: u32,
}

impl TransformationFamily {
    pub fn m(&self) -> usize {
        self.transforms.len()
    }

    pub fn descriptors(&self) -> &[String] {
        &self.descriptors
    }

    /// Applies transformation `j` to `x`, tagging the view with its label.
    pub fn apply(&self, x: &Array2<f32>, source_id: u32, j: usize) -> Result<TransformedView> {
        if j >= self.m() {
            return Err(Error::TransformOutOfRange {
                index: j,
                m: self.m(),
            });
        }
        Ok(TransformedView {
            pixels: (self.transforms[j])(x),
            transform_label: j,
            source_id,
        })
    }

    /// All M labeled views of each input, each paired with its own original.
    ///
    /// Output order: for each original, views j = 0..M in order, so the
    /// label histogram over the output is uniform.
    pub fn expand_batch<'a>(
        &self,
        batch: &'a [(u32, Array2<f32>)],
    ) -> Vec<(TransformedView, &'a Array2<f32>)> {
        let mut out = Vec::with_capacity(batch.len() * self.m());
        for (id, x) in batch {
            for j in 0..self.m() {
                out.push((self.apply(x, *id, j).unwrap(), x));
            }
        }
        out
    }
}

fn rot0(x: &Array2<f32>) -> Array2<f32> {
    x.clone()
}

/// 90 degrees counterclockwise: out[r][c] = in[c][W-1-r].
fn rot90(x: &Array2<f32>) -> Array2<f32> {
    let (h, w) = x.dim();
    Array2::from_shape_fn((w, h), |(r, c)| x[[c, w - 1 - r]])
}

fn rot180(x: &Array2<f32>) -> Array2<f32> {
    let (h, w) = x.dim();
    Array2::from_shape_fn((h, w), |(r, c)| x[[h - 1 - r, w - 1 - c]])
}

fn rot270(x: &Array2<f32>) -> Array2<f32> {
    let (h, w) = x.dim();
    Array2::from_shape_fn((w, h), |(r, c)| x[[h - 1 - c, r]])
}

/// Rotations by multiples of 90 degrees counterclockwise (M = 4).
pub fn rotation_family() -> TransformationFamily {
    TransformationFamily {
        name: "rot90".into(),
        descriptors: vec!["0".into(), "90".into(), "180".into(), "270".into()],
        transforms: vec![rot0, rot90, rot180, rot270],
    }
}
