//! Synthetic matting data: procedural composites, trimaps, persistence and
//! batching.

mod store;
mod synth;
mod trimap;

use ndarray::{s, Array2, Array3, Array4};

use crate::error::{Error, Result};

pub use store::{
    generate_dataset, load_sample, load_split, read_manifest, save_sample, ManifestRow,
    MANIFEST_FILE,
};
pub use synth::{synth_sample, MAX_UNKNOWN_FRACTION, MIN_SIZE, MIN_UNKNOWN_FRACTION};
pub use trimap::{erode, make_trimap, unknown_mask, DEFAULT_TRIMAP_KERNEL};

/// One composite `I = alpha * F + (1 - alpha) * B` with its trimap.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeSample {
    /// `[3, H, W]`
    pub image: Array3<f64>,
    pub fg: Array3<f64>,
    pub bg: Array3<f64>,
    /// `[H, W]`
    pub alpha: Array2<f64>,
    /// `[H, W]` with values in {0, 0.5, 1}.
    pub trimap: Array2<f64>,
}

impl CompositeSample {
    pub fn size(&self) -> (usize, usize) {
        self.alpha.dim()
    }

    pub fn unknown(&self) -> Array2<bool> {
        unknown_mask(&self.trimap)
    }

    pub fn unknown_fraction(&self) -> f64 {
        self.trimap.iter().filter(|t| **t == 0.5).count() as f64 / self.trimap.len() as f64
    }

    /// Largest `|I - (alpha F + (1 - alpha) B)|` over pixels and channels.
    pub fn compositing_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for c in 0..3 {
            for ((y, x), &a) in self.alpha.indexed_iter() {
                let want = a * self.fg[[c, y, x]] + (1.0 - a) * self.bg[[c, y, x]];
                worst = worst.max((self.image[[c, y, x]] - want).abs());
            }
        }
        worst
    }
}

/// Network-ready view of several samples.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 4, H, W]`: RGB followed by the trimap.
    pub input: Array4<f32>,
    /// `[B, H, W]`
    pub alpha: Array3<f64>,
    pub unknown: Array3<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.alpha.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn make_batch(samples: &[&CompositeSample]) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot batch zero samples".into()))?;
    let (h, w) = first.size();
    let b = samples.len();
    let mut input = Array4::zeros((b, 4, h, w));
    let mut alpha = Array3::zeros((b, h, w));
    let mut unknown = Array3::from_elem((b, h, w), false);
    for (i, s) in samples.iter().enumerate() {
        if s.size() != (h, w) {
            return Err(Error::Shape(format!(
                "sample {i} is {:?}, expected {:?}",
                s.size(),
                (h, w)
            )));
        }
        input
            .slice_mut(s![i, 0..3, .., ..])
            .assign(&s.image.mapv(|v| v as f32));
        input
            .slice_mut(s![i, 3, .., ..])
            .assign(&s.trimap.mapv(|v| v as f32));
        alpha.slice_mut(s![i, .., ..]).assign(&s.alpha);
        unknown.slice_mut(s![i, .., ..]).assign(&s.unknown());
    }
    Ok(Batch {
        input,
        alpha,
        unknown,
    })
}
