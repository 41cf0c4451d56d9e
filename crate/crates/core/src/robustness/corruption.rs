//! Synthetic image corruptions with five severity levels.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    GaussianBlur,
    Brightness,
    Contrast,
    Pixelate,
    Saturate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
        CorruptionKind::Saturate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::Saturate => "saturate",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown corruption kind '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        let spec = Self { kind, severity };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::Config(format!("severity {} outside 1..=5", self.severity)));
        }
        Ok(())
    }

    /// `corrupt:<kind>:<severity>` label used in evaluation output.
    pub fn label(&self) -> String {
        format!("corrupt:{}:{}", self.kind, self.severity)
    }

    /// Every kind at every severity.
    pub fn full_suite() -> Vec<CorruptionSpec> {
        CorruptionKind::ALL
            .into_iter()
            .flat_map(|kind| (1..=5).map(move |severity| CorruptionSpec { kind, severity }))
            .collect()
    }
}

/// Severity parameters, one five-entry list per kind.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeverityTable {
    pub schema: u32,
    pub gaussian_noise: Sigma,
    pub shot_noise: Photons,
    pub impulse_noise: Amount,
    pub gaussian_blur: Sigma,
    pub brightness: Shift,
    pub contrast: Factor,
    pub pixelate: Scale,
    pub saturate: Gain,
}

macro_rules! level_key {
    ($name:ident, $key:literal) => {
        #[derive(Clone, Debug, PartialEq, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct $name {
            #[serde(rename = $key)]
            pub values: [f32; 5],
        }
    };
}

level_key!(Sigma, "sigma");
level_key!(Photons, "photons");
level_key!(Amount, "amount");
level_key!(Shift, "shift");
level_key!(Factor, "factor");
level_key!(Scale, "scale");
level_key!(Gain, "gain");

pub const SEVERITY_TABLE_SOURCE: &str = include_str!("../../data/corruptions.toml");
pub const SEVERITY_SCHEMA: u32 = 1;

impl SeverityTable {
    pub fn parse(text: &str) -> Result<Self> {
        let table: SeverityTable = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if table.schema != SEVERITY_SCHEMA {
            return Err(Error::Config(format!(
                "severity table schema {} (expected {SEVERITY_SCHEMA})",
                table.schema
            )));
        }
        Ok(table)
    }

    /// The table shipped with the crate.
    pub fn builtin() -> &'static SeverityTable {
        static TABLE: OnceLock<SeverityTable> = OnceLock::new();
        TABLE.get_or_init(|| SeverityTable::parse(SEVERITY_TABLE_SOURCE).expect("bundled severity table"))
    }

    pub fn parameter(&self, spec: &CorruptionSpec) -> f32 {
        let i = usize::from(spec.severity) - 1;
        match spec.kind {
            CorruptionKind::GaussianNoise => self.gaussian_noise.values[i],
            CorruptionKind::ShotNoise => self.shot_noise.values[i],
            CorruptionKind::ImpulseNoise => self.impulse_noise.values[i],
            CorruptionKind::GaussianBlur => self.gaussian_blur.values[i],
            CorruptionKind::Brightness => self.brightness.values[i],
            CorruptionKind::Contrast => self.contrast.values[i],
            CorruptionKind::Pixelate => self.pixelate.values[i],
            CorruptionKind::Saturate => self.saturate.values[i],
        }
    }
}

/// Corrupts a single `C×H×W` image or an `N×C×H×W` batch (image `n` uses a
/// seed derived from `seed` and `n`). Output is clipped to `[0, 1]`.
pub fn corrupt(x: &Tensor, spec: &CorruptionSpec, seed: u64) -> Result<Tensor> {
    corrupt_with(x, spec, seed, SeverityTable::builtin())
}

pub fn corrupt_with(x: &Tensor, spec: &CorruptionSpec, seed: u64, table: &SeverityTable) -> Result<Tensor> {
    spec.validate()?;
    let (n, c, h, w) = match *x.shape() {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        ref s => return Err(Error::dim("corrupt", format!("expected C×H×W or N×C×H×W, got {s:?}"))),
    };
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("corrupt input must lie in [0, 1]".into()));
    }
    let param = table.parameter(spec);
    let per = c * h * w;
    let mut out = x.data().to_vec();
    for (i, img) in out.chunks_mut(per).enumerate() {
        let image_seed = if n == 1 { seed } else { crate::tenet::sample_seed(seed, i) };
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed);
        apply(img, spec.kind, param, c, h, w, &mut rng)?;
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn apply(img: &mut [f32], kind: CorruptionKind, p: f32, c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    match kind {
        CorruptionKind::GaussianNoise => {
            let normal = Normal::new(0.0f32, p).map_err(|e| Error::Config(e.to_string()))?;
            img.iter_mut().for_each(|v| *v += normal.sample(rng));
        }
        CorruptionKind::ShotNoise => {
            for v in img.iter_mut() {
                let rate = f64::from(*v * p);
                let count = if rate > 0.0 {
                    Poisson::new(rate).map_err(|e| Error::Config(e.to_string()))?.sample(rng)
                } else {
                    0.0
                };
                *v = count as f32 / p;
            }
        }
        CorruptionKind::ImpulseNoise => {
            for v in img.iter_mut() {
                if rng.gen::<f32>() < p {
                    *v = if rng.gen::<bool>() { 1.0 } else { 0.0 };
                }
            }
        }
        CorruptionKind::GaussianBlur => {
            for plane in img.chunks_mut(h * w) {
                gaussian_blur(plane, h, w, p);
            }
        }
        CorruptionKind::Brightness => img.iter_mut().for_each(|v| *v += p),
        CorruptionKind::Contrast => {
            let mean = img.iter().sum::<f32>() / img.len() as f32;
            img.iter_mut().for_each(|v| *v = (*v - mean) * p + mean);
        }
        CorruptionKind::Pixelate => {
            for plane in img.chunks_mut(h * w) {
                pixelate(plane, h, w, p);
            }
        }
        CorruptionKind::Saturate => {
            let hw = h * w;
            for px in 0..hw {
                let gray = (0..c).map(|ch| img[ch * hw + px]).sum::<f32>() / c as f32;
                for ch in 0..c {
                    let v = &mut img[ch * hw + px];
                    *v = gray + (*v - gray) * p;
                }
            }
        }
    }
    Ok(())
}

/// Separable Gaussian blur with edge clamping.
fn gaussian_blur(plane: &mut [f32], h: usize, w: usize, sigma: f32) {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * plane[y * w + clamp(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clamp(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
}

/// Bin-average down to `round(scale·size)` then nearest-neighbour back up.
fn pixelate(plane: &mut [f32], h: usize, w: usize, scale: f32) {
    let sh = ((h as f32 * scale).round() as usize).clamp(1, h);
    let sw = ((w as f32 * scale).round() as usize).clamp(1, w);
    let bin_y = |y: usize| y * sh / h;
    let bin_x = |x: usize| x * sw / w;
    let mut sums = vec![0.0f32; sh * sw];
    let mut counts = vec![0u32; sh * sw];
    for y in 0..h {
        for x in 0..w {
            let b = bin_y(y) * sw + bin_x(x);
            sums[b] += plane[y * w + x];
            counts[b] += 1;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let b = bin_y(y) * sw + bin_x(x);
            plane[y * w + x] = sums[b] / counts[b] as f32;
        }
    }
}
