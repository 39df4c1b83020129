//! View construction: split a chip into two channel-disjoint views.
//!
//! Three strategies: L*a*b* split for RGB (luminance vs chrominance), the
//! fixed spectral-band partition for 10-band multispectral chips, and a
//! PCA-decorrelated split placing the top component with the four
//! lowest-variance components.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// The ten spectral bands used for multispectral chips, in declared order.
pub const BAND_NAMES: [&str; 10] = ["2", "3", "4", "5", "6", "7", "8", "8A", "11", "12"];

/// Fixed band partition: short-wavelength view keeps red/green, the other
/// view pairs blue with the long-wavelength bands.
pub const FIXED_VIEW1_BANDS: [&str; 5] = ["2", "8", "8A", "11", "12"];
pub const FIXED_VIEW2_BANDS: [&str; 5] = ["3", "4", "5", "6", "7"];

#[derive(Clone, Debug)]
pub struct ViewPair {
    pub view1: Tensor<f32>,
    pub view2: Tensor<f32>,
    pub spec_id: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PcaBasis {
    /// Per-channel means of the sampled pixels.
    pub mean: Vec<f64>,
    /// Eigenvalues of the pixel covariance, descending.
    pub eigenvalues: Vec<f64>,
    /// Row-major [C x C]; column j is the j-th eigenvector.
    pub basis: Vec<f64>,
}

impl PcaBasis {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// max |BᵀB − I| entry.
    pub fn orthonormality_defect(&self) -> f64 {
        let c = self.channels();
        let mut worst: f64 = 0.0;
        for i in 0..c {
            for j in 0..c {
                let mut dot = 0.0;
                for r in 0..c {
                    dot += self.basis[r * c + i] * self.basis[r * c + j];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViewSpec {
    /// Convert designated RGB bands to L*a*b*; L* is one view, a*b* the other.
    Lab {
        /// Chip channel indices mapped to (R, G, B).
        rgb_bands: [usize; 3],
    },
    FixedBands {
        band_names: Vec<String>,
        view1: Vec<usize>,
        view2: Vec<usize>,
        band_mean: Vec<f64>,
        band_std: Vec<f64>,
    },
    Pca {
        view1: Vec<usize>,
        view2: Vec<usize>,
        basis: PcaBasis,
    },
}

impl ViewSpec {
    pub fn id(&self) -> &'static str {
        match self {
            ViewSpec::Lab { .. } => "lab",
            ViewSpec::FixedBands { .. } => "bands",
            ViewSpec::Pca { .. } => "pca",
        }
    }

    /// Channel counts of (view1, view2).
    pub fn view_channels(&self) -> (usize, usize) {
        match self {
            ViewSpec::Lab { .. } => (1, 2),
            ViewSpec::FixedBands { view1, view2, .. } | ViewSpec::Pca { view1, view2, .. } => {
                (view1.len(), view2.len())
            }
        }
    }

    /// Build the fixed-band spec with per-band statistics from the
    /// pretraining split.
    pub fn fixed_bands(band_names: &[String], band_mean: Vec<f64>, band_std: Vec<f64>) -> Result<Self> {
        if band_names.len() != 10 {
            return Err(Error::Shape(format!(
                "fixed band split expects 10 bands, got {}",
                band_names.len()
            )));
        }
        let lookup = |name: &str| -> Result<usize> {
            band_names
                .iter()
                .position(|b| b == name)
                .ok_or_else(|| Error::Config(format!("unknown band name {name}")))
        };
        let view1 = FIXED_VIEW1_BANDS.iter().map(|n| lookup(n)).collect::<Result<Vec<_>>>()?;
        let view2 = FIXED_VIEW2_BANDS.iter().map(|n| lookup(n)).collect::<Result<Vec<_>>>()?;
        if band_mean.len() != 10 || band_std.len() != 10 {
            return Err(Error::Shape("band stats must cover all 10 bands".into()));
        }
        Ok(ViewSpec::FixedBands {
            band_names: band_names.to_vec(),
            view1,
            view2,
            band_mean,
            band_std,
        })
    }

    pub fn pca(basis: PcaBasis) -> Result<Self> {
        let (view1, view2) = pca_partition(&basis.eigenvalues)?;
        if basis.orthonormality_defect() >= 1e-6 {
            return Err(Error::Numeric("PCA basis is not orthonormal".into()));
        }
        Ok(ViewSpec::Pca { view1, view2, basis })
    }

    pub fn apply(&self, chip: &Tensor<f32>) -> Result<ViewPair> {
        let shape = chip.shape();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("chip must be [C,H,W], got {:?}", shape)));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        match self {
            ViewSpec::Lab { rgb_bands } => {
                if let Some(&i) = rgb_bands.iter().find(|&&i| i >= c) {
                    return Err(Error::Shape(format!("rgb band {} out of {} channels", i, c)));
                }
                let rgb = chip.index_select(0, rgb_bands)?.map(|v| v.clamp(0.0, 1.0));
                let lab = rgb_to_lab(&rgb)?;
                split_lab(&lab)
            }
            ViewSpec::FixedBands { view1, view2, band_mean, band_std, .. } => {
                if c != band_mean.len() {
                    return Err(Error::Shape(format!(
                        "chip has {} channels, spec expects {}",
                        c,
                        band_mean.len()
                    )));
                }
                let mut std = chip.clone();
                let plane = h * w;
                for ci in 0..c {
                    let (m, s) = (band_mean[ci] as f32, band_std[ci].max(1e-8) as f32);
                    for v in std.data_mut()[ci * plane..(ci + 1) * plane].iter_mut() {
                        *v = (*v - m) / s;
                    }
                }
                Ok(ViewPair {
                    view1: std.index_select(0, view1)?,
                    view2: std.index_select(0, view2)?,
                    spec_id: self.id().into(),
                })
            }
            ViewSpec::Pca { view1, view2, basis } => {
                let cb = basis.channels();
                if c != cb {
                    return Err(Error::Shape(format!(
                        "chip has {} channels, PCA basis expects {}",
                        c, cb
                    )));
                }
                let plane = h * w;
                let data = chip.data();
                let mut projected = vec![0f32; c * plane];
                let mut centered = vec![0f64; c];
                for p in 0..plane {
                    for ci in 0..c {
                        centered[ci] = data[ci * plane + p] as f64 - basis.mean[ci];
                    }
                    for (j, ev) in basis.eigenvalues.iter().enumerate() {
                        let mut y = 0.0;
                        for ci in 0..c {
                            y += basis.basis[ci * c + j] * centered[ci];
                        }
                        // unit variance per component
                        projected[j * plane + p] = (y / ev.max(1e-8).sqrt()) as f32;
                    }
                }
                let proj = Tensor::new(vec![c, h, w], projected)?;
                Ok(ViewPair {
                    view1: proj.index_select(0, view1)?,
                    view2: proj.index_select(0, view2)?,
                    spec_id: self.id().into(),
                })
            }
        }
    }

    /// Write the view spec as JSON; a PCA basis goes to sibling tensor files the
    /// JSON references by stem.
    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct SpecFile<'a> {
            #[serde(flatten)]
            spec: &'a ViewSpec,
            basis_files: Option<String>,
        }
        let mut on_disk = self.clone();
        let mut basis_files = None;
        if let ViewSpec::Pca { basis, .. } = &mut on_disk {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("pca_spec")
                .to_string();
            let dir = path.parent().unwrap_or_else(|| Path::new("."));
            let c = basis.channels();
            Tensor::<f64>::new(vec![c], basis.mean.clone())?
                .save(&dir.join(format!("{stem}.mean.bin")))?;
            Tensor::<f64>::new(vec![c], basis.eigenvalues.clone())?
                .save(&dir.join(format!("{stem}.eigenvalues.bin")))?;
            Tensor::<f64>::new(vec![c, c], basis.basis.clone())?
                .save(&dir.join(format!("{stem}.basis.bin")))?;
            basis_files = Some(stem);
            basis.mean = Vec::new();
            basis.eigenvalues = Vec::new();
            basis.basis = Vec::new();
        }
        let json = serde_json::to_string_pretty(&SpecFile { spec: &on_disk, basis_files })
            .map_err(|e| Error::Json { path: path.into(), source: e })?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct SpecFile {
            #[serde(flatten)]
            spec: ViewSpec,
            basis_files: Option<String>,
        }
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: SpecFile = serde_json::from_str(&json)
            .map_err(|e| Error::Json { path: path.into(), source: e })?;
        let mut spec = file.spec;
        if let ViewSpec::Pca { basis, .. } = &mut spec {
            let stem = file
                .basis_files
                .ok_or_else(|| Error::format(path, "pca spec without basis_files"))?;
            let dir = path.parent().unwrap_or_else(|| Path::new("."));
            basis.mean = Tensor::<f64>::load(&dir.join(format!("{stem}.mean.bin")))?.into_data();
            basis.eigenvalues =
                Tensor::<f64>::load(&dir.join(format!("{stem}.eigenvalues.bin")))?.into_data();
            basis.basis = Tensor::<f64>::load(&dir.join(format!("{stem}.basis.bin")))?.into_data();
            if basis.orthonormality_defect() >= 1e-6 {
                return Err(Error::format(path, "reloaded PCA basis is not orthonormal"));
            }
        }
        Ok(spec)
    }
}

// sRGB (D65) to XYZ, row-major. The white point is taken as the row sums so
// that (1,1,1) maps to exactly (100, 0, 0).
const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const CIE_EPS: f64 = 216.0 / 24389.0;
const CIE_KAPPA: f64 = 24389.0 / 27.0;

fn srgb_linearize(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn srgb_delinearize(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > CIE_EPS {
        t.cbrt()
    } else {
        (CIE_KAPPA * t + 16.0) / 116.0
    }
}

pub fn rgb_pixel_to_lab(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let lin = [srgb_linearize(r), srgb_linearize(g), srgb_linearize(b)];
    let mut xyz = [0.0; 3];
    let mut white = [0.0; 3];
    for i in 0..3 {
        for j in 0..3 {
            xyz[i] += SRGB_TO_XYZ[i][j] * lin[j];
            white[i] += SRGB_TO_XYZ[i][j];
        }
    }
    let fx = lab_f(xyz[0] / white[0]);
    let fy = lab_f(xyz[1] / white[1]);
    let fz = lab_f(xyz[2] / white[2]);
    (116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

pub fn lab_pixel_to_rgb(l: f64, a: f64, b: f64) -> (f64, f64, f64) {
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let xr = if fx.powi(3) > CIE_EPS { fx.powi(3) } else { (116.0 * fx - 16.0) / CIE_KAPPA };
    let yr = if l > CIE_KAPPA * CIE_EPS { fy.powi(3) } else { l / CIE_KAPPA };
    let zr = if fz.powi(3) > CIE_EPS { fz.powi(3) } else { (116.0 * fz - 16.0) / CIE_KAPPA };
    let mut white = [0.0; 3];
    for i in 0..3 {
        for j in 0..3 {
            white[i] += SRGB_TO_XYZ[i][j];
        }
    }
    let xyz = [xr * white[0], yr * white[1], zr * white[2]];
    let inv = invert3(&SRGB_TO_XYZ);
    let mut lin = [0.0; 3];
    for i in 0..3 {
        for j in 0..3 {
            lin[i] += inv[i][j] * xyz[j];
        }
    }
    (srgb_delinearize(lin[0]), srgb_delinearize(lin[1]), srgb_delinearize(lin[2]))
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let c = |r: usize, cidx: usize| -> f64 {
        let (r1, r2) = ((r + 1) % 3, (r + 2) % 3);
        let (c1, c2) = ((cidx + 1) % 3, (cidx + 2) % 3);
        m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]
    };
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = c(j, i) / det;
        }
    }
    out
}

/// Convert an sRGB chip in [0,1] to L*a*b*. L* in [0,100], a*/b* roughly
/// within [-110, 110].
pub fn rgb_to_lab(chip: &Tensor<f32>) -> Result<Tensor<f32>> {
    let shape = chip.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape(format!("rgb_to_lab expects [3,H,W], got {:?}", shape)));
    }
    if chip.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Degenerate("sRGB input outside [0,1]".into()));
    }
    let plane = shape[1] * shape[2];
    let data = chip.data();
    let mut out = vec![0f32; 3 * plane];
    for p in 0..plane {
        let (l, a, b) = rgb_pixel_to_lab(
            data[p] as f64,
            data[plane + p] as f64,
            data[2 * plane + p] as f64,
        );
        out[p] = l as f32;
        out[plane + p] = a as f32;
        out[2 * plane + p] = b as f32;
    }
    Tensor::new(shape.to_vec(), out)
}

/// Inverse of `rgb_to_lab`, used by round-trip tests.
pub fn lab_to_rgb(lab: &Tensor<f32>) -> Result<Tensor<f32>> {
    let shape = lab.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape(format!("lab_to_rgb expects [3,H,W], got {:?}", shape)));
    }
    let plane = shape[1] * shape[2];
    let data = lab.data();
    let mut out = vec![0f32; 3 * plane];
    for p in 0..plane {
        let (r, g, b) = lab_pixel_to_rgb(
            data[p] as f64,
            data[plane + p] as f64,
            data[2 * plane + p] as f64,
        );
        out[p] = r as f32;
        out[plane + p] = g as f32;
        out[2 * plane + p] = b as f32;
    }
    Tensor::new(shape.to_vec(), out)
}

/// L* (scaled by 1/100) as view1, a*b* (scaled by 1/110) as view2.
pub fn split_lab(lab: &Tensor<f32>) -> Result<ViewPair> {
    let shape = lab.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape(format!("split_lab expects [3,H,W], got {:?}", shape)));
    }
    let parts = lab.split(0, &[1, 2])?;
    Ok(ViewPair {
        view1: parts[0].map(|v| v / 100.0),
        view2: parts[1].map(|v| v / 110.0),
        spec_id: "lab".into(),
    })
}

/// Variance-based partition: view1 takes the top component plus the
/// floor(C/2)-1 lowest-variance components (4 of them when C = 10), view2
/// the remainder.
pub fn pca_partition(eigenvalues: &[f64]) -> Result<(Vec<usize>, Vec<usize>)> {
    let c = eigenvalues.len();
    if c < 3 {
        return Err(Error::Shape(format!("pca partition needs >= 3 channels, got {c}")));
    }
    if eigenvalues.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::Numeric("eigenvalues must be sorted descending".into()));
    }
    let tail = c / 2 - 1;
    let mut view1 = vec![0];
    view1.extend(c - tail..c);
    let view2: Vec<usize> = (1..c - tail).collect();
    Ok((view1, view2))
}

/// Fit per-channel means and the covariance eigenbasis from randomly
/// sampled pixels (144 per chip by default).
pub fn pca_fit(
    chips: &[&Tensor<f32>],
    pixels_per_chip: usize,
    rng: &mut impl Rng,
) -> Result<PcaBasis> {
    if chips.len() < 2 {
        return Err(Error::Degenerate("pca_fit needs at least 2 chips".into()));
    }
    let shape = chips[0].shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if pixels_per_chip > h * w {
        return Err(Error::Config(format!(
            "pixels_per_chip {} exceeds {} pixels",
            pixels_per_chip,
            h * w
        )));
    }
    let plane = h * w;
    let mut samples: Vec<f64> = Vec::with_capacity(chips.len() * pixels_per_chip * c);
    for chip in chips {
        if chip.shape() != shape {
            return Err(Error::Shape("pca_fit chips must share a shape".into()));
        }
        let data = chip.data();
        for _ in 0..pixels_per_chip {
            let p = rng.gen_range(0..plane);
            for ci in 0..c {
                samples.push(data[ci * plane + p] as f64);
            }
        }
    }
    let n = samples.len() / c;
    let mut mean = vec![0.0; c];
    for row in samples.chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; c * c];
    for row in samples.chunks_exact(c) {
        for i in 0..c {
            let di = row[i] - mean[i];
            for j in i..c {
                cov[i * c + j] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            let v = cov[i * c + j] / (n - 1) as f64;
            cov[i * c + j] = v;
            cov[j * c + i] = v;
        }
    }
    let (eigenvalues, basis) = jacobi_eigh(&cov, c);
    for (i, ev) in eigenvalues.iter().enumerate() {
        if *ev < 1e-10 {
            log::warn!("PCA component {i} is rank-deficient (eigenvalue {ev:.3e})");
        }
    }
    let out = PcaBasis { mean, eigenvalues, basis };
    if out.orthonormality_defect() >= 1e-6 {
        return Err(Error::Numeric("jacobi eigenbasis failed orthonormality".into()));
    }
    Ok(out)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues sorted descending and the matching eigenvector columns, each
/// sign-fixed so its largest-magnitude component is positive.
fn jacobi_eigh(sym: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = sym.to_vec();
    let mut v = vec![0.0; c * c];
    for i in 0..c {
        v[i * c + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..c {
            for j in i + 1..c {
                off += a[i * c + j] * a[i * c + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..c {
            for q in p + 1..c {
                let apq = a[p * c + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * c + q] - a[p * c + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..c {
                    let akp = a[k * c + p];
                    let akq = a[k * c + q];
                    a[k * c + p] = cs * akp - sn * akq;
                    a[k * c + q] = sn * akp + cs * akq;
                }
                for k in 0..c {
                    let apk = a[p * c + k];
                    let aqk = a[q * c + k];
                    a[p * c + k] = cs * apk - sn * aqk;
                    a[q * c + k] = sn * apk + cs * aqk;
                }
                for k in 0..c {
                    let vkp = v[k * c + p];
                    let vkq = v[k * c + q];
                    v[k * c + p] = cs * vkp - sn * vkq;
                    v[k * c + q] = sn * vkp + cs * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&i, &j| a[j * c + j].partial_cmp(&a[i * c + i]).unwrap());
    let mut eigenvalues = Vec::with_capacity(c);
    let mut basis = vec![0.0; c * c];
    for (dst, &src) in order.iter().enumerate() {
        eigenvalues.push(a[src * c + src]);
        // sign convention: largest-magnitude component positive
        let mut best = 0;
        for k in 1..c {
            if v[k * c + src].abs() > v[best * c + src].abs() {
                best = k;
            }
        }
        let sign = if v[best * c + src] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..c {
            basis[k * c + dst] = sign * v[k * c + src];
        }
    }
    (eigenvalues, basis)
}
