//! Chip datasets: on-disk format, synthetic generation, augmentation and
//! split assignment.
//!
//! A dataset directory holds `meta.json`, `index.jsonl` (one entry per
//! chip), `splits.json` and a `chips/` directory of MSC1 files.

use crate::error::{Error, Result};
use crate::nn::TaskMode;
use crate::tensor::Tensor;
use crate::views::BAND_NAMES;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};

const MSC1_MAGIC: &[u8; 8] = b"MSCHIP01";
const DTYPE_F32: u32 = 0;

/// Write a [C,H,W] chip as MSC1: magic, LE u32 C/H/W, LE u32 dtype tag,
/// raw little-endian values.
pub fn write_chip(path: &Path, chip: &Tensor<f32>) -> Result<()> {
    let shape = chip.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("chip must be [C,H,W], got {:?}", shape)));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(24 + chip.numel() * 4);
    buf.extend_from_slice(MSC1_MAGIC);
    for &dim in shape {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    buf.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for &v in chip.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_chip(path: &Path) -> Result<Tensor<f32>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 24 {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[..8] != MSC1_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let (c, h, w) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
    let dtype = u32_at(20);
    if dtype != DTYPE_F32 {
        return Err(Error::format(path, format!("unsupported dtype tag {dtype}")));
    }
    let n = c * h * w;
    if bytes.len() != 24 + n * 4 {
        return Err(Error::format(
            path,
            format!("expected {} payload bytes, found {}", n * 4, bytes.len() - 24),
        ));
    }
    let data = bytes[24..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Tensor::new(vec![c, h, w], data)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub band_names: Vec<String>,
    pub num_classes: usize,
    pub task: TaskMode,
    pub height: usize,
    pub width: usize,
}

impl DatasetMeta {
    /// Channel indices of the (R, G, B) bands when present: bands "4", "3"
    /// and "2" in that order.
    pub fn rgb_bands(&self) -> Option<[usize; 3]> {
        let find = |n: &str| self.band_names.iter().position(|b| b == n);
        Some([find("4")?, find("3")?, find("2")?])
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Single(usize),
    Multi(Vec<usize>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct IndexEntry {
    file: String,
    label: Label,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deterministic disjoint split of `n` items by shuffling with the given
/// seed and cutting at the requested fractions.
pub fn make_splits(n: usize, train_frac: f64, val_frac: f64, seed: u64) -> Result<Splits> {
    if !(0.0..=1.0).contains(&train_frac)
        || !(0.0..=1.0).contains(&val_frac)
        || train_frac + val_frac > 1.0
    {
        return Err(Error::Config("split fractions must be in [0,1] and sum to <= 1".into()));
    }
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = (n as f64 * train_frac).round() as usize;
    let n_val = ((n as f64 * val_frac).round() as usize).min(n - n_train);
    Ok(Splits {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    })
}

#[derive(Clone, Debug)]
pub struct ChipDataset {
    root: PathBuf,
    pub meta: DatasetMeta,
    entries: Vec<IndexEntry>,
    pub splits: Splits,
}

impl ChipDataset {
    pub fn create(
        root: &Path,
        meta: DatasetMeta,
        chips: &[Tensor<f32>],
        labels: &[Label],
        splits: Splits,
    ) -> Result<Self> {
        if chips.len() != labels.len() {
            return Err(Error::Shape("one label per chip required".into()));
        }
        let chips_dir = root.join("chips");
        std::fs::create_dir_all(&chips_dir).map_err(|e| Error::io(&chips_dir, e))?;
        let mut entries = Vec::with_capacity(chips.len());
        for (i, (chip, label)) in chips.iter().zip(labels).enumerate() {
            let file = format!("chips/chip_{i:06}.msc");
            write_chip(&root.join(&file), chip)?;
            entries.push(IndexEntry { file, label: label.clone() });
        }
        let meta_path = root.join("meta.json");
        std::fs::write(
            &meta_path,
            serde_json::to_string_pretty(&meta)
                .map_err(|e| Error::Json { path: meta_path.clone(), source: e })?,
        )
        .map_err(|e| Error::io(&meta_path, e))?;
        let index_path = root.join("index.jsonl");
        let mut index = String::new();
        for e in &entries {
            index.push_str(
                &serde_json::to_string(e)
                    .map_err(|er| Error::Json { path: index_path.clone(), source: er })?,
            );
            index.push('\n');
        }
        std::fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))?;
        let splits_path = root.join("splits.json");
        std::fs::write(
            &splits_path,
            serde_json::to_string_pretty(&splits)
                .map_err(|e| Error::Json { path: splits_path.clone(), source: e })?,
        )
        .map_err(|e| Error::io(&splits_path, e))?;
        Ok(ChipDataset { root: root.to_path_buf(), meta, entries, splits })
    }

    pub fn open(root: &Path) -> Result<Self> {
        let meta_path = root.join("meta.json");
        let meta: DatasetMeta = serde_json::from_str(
            &std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
        )
        .map_err(|e| Error::Json { path: meta_path, source: e })?;
        let index_path = root.join("index.jsonl");
        let f = std::fs::File::open(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let mut entries = Vec::new();
        for line in std::io::BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(&index_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::Json { path: index_path.clone(), source: e })?,
            );
        }
        let splits_path = root.join("splits.json");
        let splits: Splits = serde_json::from_str(
            &std::fs::read_to_string(&splits_path).map_err(|e| Error::io(&splits_path, e))?,
        )
        .map_err(|e| Error::Json { path: splits_path, source: e })?;
        for split in [&splits.train, &splits.val, &splits.test] {
            if let Some(&i) = split.iter().find(|&&i| i >= entries.len()) {
                return Err(Error::Config(format!(
                    "split references chip {} but the index has {}",
                    i,
                    entries.len()
                )));
            }
        }
        Ok(ChipDataset { root: root.to_path_buf(), meta, entries, splits })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn chip(&self, i: usize) -> Result<Tensor<f32>> {
        let chip = read_chip(&self.root.join(&self.entries[i].file))?;
        let expect = [self.meta.band_names.len(), self.meta.height, self.meta.width];
        if chip.shape() != expect {
            return Err(Error::format(
                &self.root.join(&self.entries[i].file),
                format!("chip shape {:?} does not match meta {:?}", chip.shape(), expect),
            ));
        }
        Ok(chip)
    }

    pub fn label(&self, i: usize) -> &Label {
        &self.entries[i].label
    }

    /// Multi-hot encoding of a label, single-label included.
    pub fn label_vector(&self, i: usize) -> Vec<f32> {
        let mut v = vec![0.0; self.meta.num_classes];
        match &self.entries[i].label {
            Label::Single(c) => v[*c] = 1.0,
            Label::Multi(cs) => cs.iter().for_each(|&c| v[c] = 1.0),
        }
        v
    }

    /// Per-band mean and standard deviation over the given chip indices.
    pub fn band_stats(&self, indices: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        if indices.is_empty() {
            return Err(Error::Degenerate("band stats over an empty set".into()));
        }
        let c = self.meta.band_names.len();
        let mut sum = vec![0.0f64; c];
        let mut sumsq = vec![0.0f64; c];
        let mut count = 0usize;
        for &i in indices {
            let chip = self.chip(i)?;
            let plane = self.meta.height * self.meta.width;
            for ci in 0..c {
                for &v in &chip.data()[ci * plane..(ci + 1) * plane] {
                    sum[ci] += v as f64;
                    sumsq[ci] += (v as f64) * (v as f64);
                }
            }
            count += plane;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let std = sumsq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / count as f64 - m * m).max(0.0).sqrt())
            .collect();
        Ok((mean, std))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub task: TaskMode,
    /// Additive noise amplitude.
    pub noise: f64,
    /// When set, the RGB bands carry no class signal; only the remaining
    /// bands separate the classes.
    pub rgb_uninformative: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 200,
            num_classes: 4,
            height: 32,
            width: 32,
            task: TaskMode::SingleLabel,
            noise: 0.05,
            rgb_uninformative: false,
        }
    }
}

/// Bilinear upsample of a [gh, gw] grid to [h, w] with half-pixel centers.
fn upsample_grid(grid: &[f64], gh: usize, gw: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let sy = ((y as f64 + 0.5) * gh as f64 / h as f64 - 0.5).clamp(0.0, gh as f64 - 1.0);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(gh - 1);
        let fy = sy - y0 as f64;
        for x in 0..w {
            let sx = ((x as f64 + 0.5) * gw as f64 / w as f64 - 0.5).clamp(0.0, gw as f64 - 1.0);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(gw - 1);
            let fx = sx - x0 as f64;
            let top = grid[y0 * gw + x0] * (1.0 - fx) + grid[y0 * gw + x1] * fx;
            let bot = grid[y1 * gw + x0] * (1.0 - fx) + grid[y1 * gw + x1] * fx;
            out[y * w + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

fn smooth_field(h: usize, w: usize, rng: &mut impl Rng) -> Vec<f64> {
    let grid: Vec<f64> = (0..16).map(|_| rng.gen_range(0.5..1.5)).collect();
    upsample_grid(&grid, 4, 4, h, w)
}

/// Per-class band signatures in [0.5, 1.5]. With `rgb_uninformative` the
/// RGB band entries are pinned to 1 for every class.
fn class_signatures(cfg: &SynthConfig, meta: &DatasetMeta, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let c = meta.band_names.len();
    let rgb = meta.rgb_bands();
    (0..cfg.num_classes)
        .map(|_| {
            (0..c)
                .map(|ci| {
                    let pinned = cfg.rgb_uninformative
                        && rgb.map_or(false, |bands| bands.contains(&ci));
                    // draw regardless so pinning does not shift the stream
                    let v = rng.gen_range(0.5..1.5);
                    if pinned {
                        1.0
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect()
}

/// Generate a labeled synthetic dataset: each chip is a per-band class
/// signature modulated by a smooth spatial field plus noise. Multi-label
/// chips blend 1-3 class patterns over random rectangles.
pub fn generate_synthetic(cfg: &SynthConfig, rng: &mut impl Rng) -> Result<(DatasetMeta, Vec<Tensor<f32>>, Vec<Label>)> {
    if cfg.n == 0 || cfg.num_classes < 2 {
        return Err(Error::Config("need n >= 1 chips and >= 2 classes".into()));
    }
    if cfg.height < 4 || cfg.width < 4 {
        return Err(Error::Config("chips must be at least 4x4".into()));
    }
    let meta = DatasetMeta {
        band_names: BAND_NAMES.iter().map(|s| s.to_string()).collect(),
        num_classes: cfg.num_classes,
        task: cfg.task,
        height: cfg.height,
        width: cfg.width,
    };
    let sigs = class_signatures(cfg, &meta, rng);
    let (c, h, w) = (meta.band_names.len(), cfg.height, cfg.width);
    let plane = h * w;
    let mut chips = Vec::with_capacity(cfg.n);
    let mut labels = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let mut data = vec![0f32; c * plane];
        let label = match cfg.task {
            TaskMode::SingleLabel => {
                let class = i % cfg.num_classes;
                let field = smooth_field(h, w, rng);
                for ci in 0..c {
                    for p in 0..plane {
                        let v = sigs[class][ci] * field[p]
                            + cfg.noise * rng.gen_range(-1.0..1.0);
                        data[ci * plane + p] = v.max(0.0) as f32;
                    }
                }
                Label::Single(class)
            }
            TaskMode::MultiLabel => {
                let n_active = rng.gen_range(1..=3.min(cfg.num_classes));
                let mut active: Vec<usize> = Vec::new();
                while active.len() < n_active {
                    let cl = rng.gen_range(0..cfg.num_classes);
                    if !active.contains(&cl) {
                        active.push(cl);
                    }
                }
                active.sort();
                let base = smooth_field(h, w, rng);
                for ci in 0..c {
                    for p in 0..plane {
                        data[ci * plane + p] = (0.5 * base[p]) as f32;
                    }
                }
                for &cl in &active {
                    // rectangle covering at least a quarter of each side
                    let rh = rng.gen_range(h / 4..=h / 2);
                    let rw = rng.gen_range(w / 4..=w / 2);
                    let y0 = rng.gen_range(0..=h - rh);
                    let x0 = rng.gen_range(0..=w - rw);
                    let field = smooth_field(h, w, rng);
                    for ci in 0..c {
                        for y in y0..y0 + rh {
                            for x in x0..x0 + rw {
                                let p = y * w + x;
                                data[ci * plane + p] += (sigs[cl][ci] * field[p]) as f32;
                            }
                        }
                    }
                }
                for v in data.iter_mut() {
                    *v = (*v as f64 + cfg.noise * rng.gen_range(-1.0..1.0)).max(0.0) as f32;
                }
                Label::Multi(active)
            }
        };
        chips.push(Tensor::new(vec![c, h, w], data)?);
        labels.push(label);
    }
    Ok((meta, chips, labels))
}

/// Bilinear resize with half-pixel sample centers.
pub fn resize_bilinear(chip: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let shape = chip.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("resize expects [C,H,W], got {:?}", shape)));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("resize target must be non-empty".into()));
    }
    if out_h == h && out_w == w {
        return Ok(chip.clone());
    }
    let plane_in = h * w;
    let plane_out = out_h * out_w;
    let data = chip.data();
    let mut out = vec![0f32; c * plane_out];
    for y in 0..out_h {
        let sy = ((y as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).clamp(0.0, h as f64 - 1.0);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = (sy - y0 as f64) as f32;
        for x in 0..out_w {
            let sx = ((x as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).clamp(0.0, w as f64 - 1.0);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = (sx - x0 as f64) as f32;
            for ci in 0..c {
                let at = |yy: usize, xx: usize| data[ci * plane_in + yy * w + xx];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[ci * plane_out + y * out_w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

pub fn horizontal_flip(chip: &Tensor<f32>) -> Tensor<f32> {
    let shape = chip.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let plane = h * w;
    let data = chip.data();
    let mut out = vec![0f32; data.len()];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[ci * plane + y * w + x] = data[ci * plane + y * w + (w - 1 - x)];
            }
        }
    }
    Tensor::new(shape.to_vec(), out).unwrap()
}

/// Random crop with area in `scale` x input area and aspect in `ratio`,
/// resized to [out_h, out_w]. Falls back to a center crop after 10 failed
/// draws.
pub fn random_resized_crop(
    chip: &Tensor<f32>,
    out_h: usize,
    out_w: usize,
    rng: &mut impl Rng,
) -> Result<Tensor<f32>> {
    let shape = chip.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("crop expects [C,H,W], got {:?}", shape)));
    }
    let (h, w) = (shape[1], shape[2]);
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target_area = area * rng.gen_range(0.08..1.0);
        let log_ratio = rng.gen_range((3.0f64 / 4.0).ln()..(4.0f64 / 3.0).ln());
        let ratio = log_ratio.exp();
        let cw = (target_area * ratio).sqrt().round() as usize;
        let ch = (target_area / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let y0 = rng.gen_range(0..=h - ch);
            let x0 = rng.gen_range(0..=w - cw);
            let crop = crop_region(chip, y0, x0, ch, cw);
            return resize_bilinear(&crop, out_h, out_w);
        }
    }
    let side = h.min(w);
    let crop = crop_region(chip, (h - side) / 2, (w - side) / 2, side, side);
    resize_bilinear(&crop, out_h, out_w)
}

fn crop_region(chip: &Tensor<f32>, y0: usize, x0: usize, ch: usize, cw: usize) -> Tensor<f32> {
    let shape = chip.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    debug_assert!(y0 + ch <= h && x0 + cw <= w);
    let plane = h * w;
    let data = chip.data();
    let mut out = Vec::with_capacity(c * ch * cw);
    for ci in 0..c {
        for y in y0..y0 + ch {
            let base = ci * plane + y * w + x0;
            out.extend_from_slice(&data[base..base + cw]);
        }
    }
    Tensor::new(vec![c, ch, cw], out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chip123() -> Tensor<f32> {
        Tensor::new(vec![2, 2, 3], (0..12).map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn chip_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.msc");
        let chip = chip123();
        write_chip(&path, &chip).unwrap();
        assert_eq!(read_chip(&path).unwrap(), chip);
    }

    #[test]
    fn corrupt_chip_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.msc");
        let chip = chip123();
        write_chip(&path, &chip).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        let err = read_chip(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("magic"), "{err}");

        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        let err = read_chip(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("payload"), "{err}");

        let mut bad_dtype = good.clone();
        bad_dtype[20] = 7;
        std::fs::write(&path, &bad_dtype).unwrap();
        let err = read_chip(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("dtype"), "{err}");
    }

    #[test]
    fn splits_are_deterministic_and_disjoint() {
        let a = make_splits(100, 0.7, 0.1, 9).unwrap();
        let b = make_splits(100, 0.7, 0.1, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_splits(100, 0.7, 0.1, 10).unwrap());
        assert_eq!(a.train.len(), 70);
        assert_eq!(a.val.len(), 10);
        assert_eq!(a.test.len(), 20);
        let mut all: Vec<usize> =
            a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(make_splits(10, 0.8, 0.5, 0).is_err());
    }

    #[test]
    fn flip_is_an_involution() {
        let chip = chip123();
        let flipped = horizontal_flip(&chip);
        assert_ne!(flipped, chip);
        assert_eq!(horizontal_flip(&flipped), chip);
        // row [0,1,2] becomes [2,1,0]
        assert_eq!(&flipped.data()[..3], &[2.0, 1.0, 0.0]);
    }

    #[test]
    fn resize_identity_and_average() {
        let chip = chip123();
        assert_eq!(resize_bilinear(&chip, 2, 3).unwrap(), chip);
        let square = Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let one = resize_bilinear(&square, 1, 1).unwrap();
        assert_relative_eq!(one.data()[0], 4.0, epsilon = 1e-6);
        // upsample of a constant stays constant
        let flat = Tensor::full(&[1, 2, 2], 2.5f32);
        let up = resize_bilinear(&flat, 5, 7).unwrap();
        assert!(up.data().iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }

    #[test]
    fn crop_shape_determinism_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f32> = (0..3 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect();
        let chip = Tensor::new(vec![3, 32, 32], data).unwrap();
        let a = random_resized_crop(&chip, 32, 32, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = random_resized_crop(&chip, 32, 32, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.shape(), &[3, 32, 32]);
        assert_eq!(a, b);
        let (lo, hi) = chip.data().iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        // bilinear interpolation stays inside the input value hull
        assert!(a.data().iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
        let c = random_resized_crop(&chip, 32, 32, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_ne!(a, c);
    }

    fn synth(cfg: &SynthConfig, seed: u64) -> (DatasetMeta, Vec<Tensor<f32>>, Vec<Label>) {
        generate_synthetic(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let cfg = SynthConfig { n: 12, height: 8, width: 8, ..Default::default() };
        let (_, c1, l1) = synth(&cfg, 3);
        let (_, c2, l2) = synth(&cfg, 3);
        assert_eq!(c1.len(), 12);
        for (a, b) in c1.iter().zip(&c2) {
            assert_eq!(a, b);
        }
        assert_eq!(
            l1.iter().map(|l| format!("{l:?}")).collect::<Vec<_>>(),
            l2.iter().map(|l| format!("{l:?}")).collect::<Vec<_>>()
        );
        let (_, c3, _) = synth(&cfg, 4);
        assert_ne!(c1[0], c3[0]);
    }

    #[test]
    fn single_label_classes_are_balanced_and_separable() {
        let cfg = SynthConfig { n: 40, num_classes: 4, height: 8, width: 8, ..Default::default() };
        let (meta, chips, labels) = synth(&cfg, 11);
        let mut counts = vec![0; 4];
        for l in &labels {
            let Label::Single(c) = l else { panic!() };
            counts[*c] += 1;
        }
        assert_eq!(counts, vec![10; 4]);
        // per-class mean band profiles differ across classes
        let c = meta.band_names.len();
        let mut profiles = vec![vec![0.0f64; c]; 4];
        for (chip, l) in chips.iter().zip(&labels) {
            let Label::Single(cl) = l else { panic!() };
            let plane = 64;
            for ci in 0..c {
                let m: f32 = chip.data()[ci * plane..(ci + 1) * plane].iter().sum::<f32>() / 64.0;
                profiles[*cl][ci] += m as f64 / 10.0;
            }
        }
        for a in 0..4 {
            for b in a + 1..4 {
                let dist: f64 = profiles[a]
                    .iter()
                    .zip(&profiles[b])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(dist > 0.1, "classes {a} and {b} overlap: {dist}");
            }
        }
    }

    #[test]
    fn rgb_uninformative_pins_rgb_bands() {
        let cfg = SynthConfig {
            n: 80,
            num_classes: 4,
            height: 8,
            width: 8,
            rgb_uninformative: true,
            ..Default::default()
        };
        let (meta, chips, labels) = synth(&cfg, 19);
        let rgb = meta.rgb_bands().unwrap();
        let c = meta.band_names.len();
        let mut profiles = vec![vec![0.0f64; c]; 4];
        let mut counts = vec![0usize; 4];
        for (chip, l) in chips.iter().zip(&labels) {
            let Label::Single(cl) = l else { panic!() };
            counts[*cl] += 1;
            for ci in 0..c {
                let m: f32 = chip.data()[ci * 64..(ci + 1) * 64].iter().sum::<f32>() / 64.0;
                profiles[*cl][ci] += m as f64;
            }
        }
        for (p, &n) in profiles.iter_mut().zip(&counts) {
            p.iter_mut().for_each(|v| *v /= n as f64);
        }
        // RGB band means agree across classes; some non-RGB band separates them
        for &ci in &rgb {
            for a in 0..4 {
                for b in a + 1..4 {
                    assert!(
                        (profiles[a][ci] - profiles[b][ci]).abs() < 0.05,
                        "rgb band {ci} separates {a}/{b}"
                    );
                }
            }
        }
        let mut separated = false;
        for ci in 0..c {
            if rgb.contains(&ci) {
                continue;
            }
            for a in 0..4 {
                for b in a + 1..4 {
                    if (profiles[a][ci] - profiles[b][ci]).abs() > 0.15 {
                        separated = true;
                    }
                }
            }
        }
        assert!(separated, "no non-rgb band separates the classes");
    }

    #[test]
    fn multi_label_dataset_has_valid_labels() {
        let cfg = SynthConfig {
            n: 30,
            num_classes: 5,
            height: 8,
            width: 8,
            task: TaskMode::MultiLabel,
            ..Default::default()
        };
        let (_, chips, labels) = synth(&cfg, 7);
        assert_eq!(chips.len(), 30);
        for l in &labels {
            let Label::Multi(cs) = l else { panic!() };
            assert!((1..=3).contains(&cs.len()));
            assert!(cs.windows(2).all(|w| w[0] < w[1]));
            assert!(cs.iter().all(|&c| c < 5));
        }
    }

    #[test]
    fn dataset_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { n: 10, height: 8, width: 8, ..Default::default() };
        let (meta, chips, labels) = synth(&cfg, 2);
        let splits = make_splits(10, 0.6, 0.2, 1).unwrap();
        let ds = ChipDataset::create(dir.path(), meta, &chips, &labels, splits.clone()).unwrap();
        let back = ChipDataset::open(dir.path()).unwrap();
        assert_eq!(back.len(), 10);
        assert_eq!(back.splits, splits);
        assert_eq!(back.chip(3).unwrap(), chips[3]);
        assert_eq!(back.label_vector(0), ds.label_vector(0));
        assert_eq!(back.meta.rgb_bands(), Some([2, 1, 0]));
    }

    #[test]
    fn band_stats_standardize() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { n: 20, height: 8, width: 8, ..Default::default() };
        let (meta, chips, labels) = synth(&cfg, 13);
        let splits = make_splits(20, 1.0, 0.0, 1).unwrap();
        let ds = ChipDataset::create(dir.path(), meta, &chips, &labels, splits).unwrap();
        let idx: Vec<usize> = (0..20).collect();
        let (mean, std) = ds.band_stats(&idx).unwrap();
        assert_eq!(mean.len(), 10);
        // standardizing with the fitted stats gives mean 0, var 1 per band
        for ci in 0..10 {
            let mut s = 0.0f64;
            let mut sq = 0.0f64;
            for chip in &chips {
                for &v in &chip.data()[ci * 64..(ci + 1) * 64] {
                    let z = (v as f64 - mean[ci]) / std[ci];
                    s += z;
                    sq += z * z;
                }
            }
            let n = (20 * 64) as f64;
            assert!((s / n).abs() < 1e-6);
            assert_relative_eq!(sq / n, 1.0, max_relative = 1e-4);
        }
    }
}
