use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::synth::{synth_sample, FULL_SCALE};
use super::CompositeSample;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
const SPLIT_STRIDE: u64 = 5_000_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub split: String,
    pub seed: u64,
    pub size: usize,
}

fn to_u16(v: f64) -> u16 {
    (v * FULL_SCALE).round() as u16
}

fn save_rgb(path: &Path, a: &Array3<f64>) -> Result<()> {
    let (_, h, w) = a.dim();
    let buf = ImageBuffer::<Rgb<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([
            to_u16(a[[0, y, x]]),
            to_u16(a[[1, y, x]]),
            to_u16(a[[2, y, x]]),
        ])
    });
    buf.save(path)?;
    Ok(())
}

fn load_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?.into_rgb16();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn(
        (3, h as usize, w as usize),
        |(c, y, x)| img.get_pixel(x as u32, y as u32)[c] as f64 / FULL_SCALE,
    ))
}

pub fn save_sample(dir: &Path, s: &CompositeSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_rgb(&dir.join("image.png"), &s.image)?;
    save_rgb(&dir.join("fg.png"), &s.fg)?;
    save_rgb(&dir.join("bg.png"), &s.bg)?;
    let (h, w) = s.size();
    ImageBuffer::<Luma<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
        Luma([to_u16(s.alpha[[y as usize, x as usize]])])
    })
    .save(dir.join("alpha.png"))?;
    ImageBuffer::<Luma<u8>, Vec<u8>>::from_fn(w as u32, h as u32, |x, y| {
        let t = s.trimap[[y as usize, x as usize]];
        Luma([if t == 0.5 { 128 } else { (t * 255.0) as u8 }])
    })
    .save(dir.join("trimap.png"))?;
    Ok(())
}

pub fn load_sample(dir: &Path) -> Result<CompositeSample> {
    let need = |name: &str| -> Result<PathBuf> {
        let p = dir.join(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact(p))
        }
    };
    let image = load_rgb(&need("image.png")?)?;
    let fg = load_rgb(&need("fg.png")?)?;
    let bg = load_rgb(&need("bg.png")?)?;
    let a = image::open(need("alpha.png")?)?.into_luma16();
    let alpha = Array2::from_shape_fn((a.height() as usize, a.width() as usize), |(y, x)| {
        a.get_pixel(x as u32, y as u32)[0] as f64 / FULL_SCALE
    });
    let t = image::open(need("trimap.png")?)?.into_luma8();
    let trimap = Array2::from_shape_fn((t.height() as usize, t.width() as usize), |(y, x)| match t
        .get_pixel(x as u32, y as u32)[0]
    {
        0 => 0.0,
        255 => 1.0,
        _ => 0.5,
    });
    Ok(CompositeSample {
        image,
        fg,
        bg,
        alpha,
        trimap,
    })
}

fn sample_seed(seed: u64, split_index: u64, i: usize) -> Result<u64> {
    seed.checked_mul(2 * SPLIT_STRIDE)
        .and_then(|b| b.checked_add(split_index * SPLIT_STRIDE + i as u64))
        .ok_or_else(|| Error::InvalidArgument(format!("dataset seed {seed} is too large")))
}

fn dir_is_nonempty(p: &Path) -> Result<bool> {
    Ok(p.exists() && fs::read_dir(p)?.next().is_some())
}

/// Writes `n_train + n_test` samples under `root` with a manifest. Train and
/// test draw from disjoint seed ranges. A non-empty `root` is only replaced
/// when `force` is set.
pub fn generate_dataset(
    root: &Path,
    n_train: usize,
    n_test: usize,
    size: usize,
    seed: u64,
    force: bool,
) -> Result<Vec<ManifestRow>> {
    if n_train as u64 >= SPLIT_STRIDE || n_test as u64 >= SPLIT_STRIDE {
        return Err(Error::InvalidArgument(format!(
            "at most {} samples per split",
            SPLIT_STRIDE - 1
        )));
    }
    if dir_is_nonempty(root)? {
        if !force {
            return Err(Error::WouldOverwrite(root.to_path_buf()));
        }
        fs::remove_dir_all(root)?;
    }
    fs::create_dir_all(root)?;
    let mut rows = Vec::with_capacity(n_train + n_test);
    for (split_index, (split, n)) in [("train", n_train), ("test", n_test)]
        .into_iter()
        .enumerate()
    {
        for i in 0..n {
            let s = sample_seed(seed, split_index as u64, i)?;
            let id = format!("{split}-{i:05}");
            let sample = synth_sample(s, size)?;
            save_sample(&root.join(split).join(&id), &sample)?;
            rows.push(ManifestRow {
                id,
                split: split.to_string(),
                seed: s,
                size,
            });
        }
        log::info!("wrote {n} {split} samples");
    }
    let mut w = csv::Writer::from_path(root.join(MANIFEST_FILE))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRow>> {
    let path = root.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::MissingArtifact(path));
    }
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize()
        .collect::<std::result::Result<Vec<ManifestRow>, _>>()?)
}

/// Every sample of one split, in manifest order.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<CompositeSample>> {
    let rows: Vec<ManifestRow> = read_manifest(root)?
        .into_iter()
        .filter(|r| r.split == split)
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptyRegion(format!(
            "split `{split}` of {} has no samples",
            root.display()
        )));
    }
    rows.iter()
        .map(|r| load_sample(&root.join(&r.split).join(&r.id)))
        .collect()
}
