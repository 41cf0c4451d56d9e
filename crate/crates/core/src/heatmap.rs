//! Grad-CAM and per-group map export as graymap files.

use std::fs;
use std::path::{Path, PathBuf};

use crate::convnet::Model;
use crate::error::{Error, Result};
use crate::pnm::{quantize, Raster};
use crate::tenet::{analyze, class_activation_map, TenetConfig};
use crate::tensor::Tensor;

/// Files written by [`export_heatmap`].
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapFiles {
    pub gradcam: PathBuf,
    pub groups: Vec<PathBuf>,
    pub predicted: usize,
}

/// Bilinear resize of an `h×w` map (half-pixel centres, edge clamped).
pub fn upsample_bilinear(map: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, f32) {
        let src = ((o as f32 + 0.5) * inp as f32 / out as f32 - 0.5).clamp(0.0, (inp - 1) as f32);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, src - i0 as f32)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, out_w, w);
            let top = map[y0 * w + x0] * (1.0 - fx) + map[y0 * w + x1] * fx;
            let bottom = map[y1 * w + x0] * (1.0 - fx) + map[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

fn normalized(values: &[f32]) -> Vec<f32> {
    let mut v = values.to_vec();
    crate::tenet::normalize_min_max(&mut v);
    v
}

fn write_gray(path: &Path, values: &[f32], h: usize, w: usize) -> Result<()> {
    let raster = Raster {
        width: w,
        height: h,
        channels: 1,
        pixels: values.iter().map(|&v| quantize(v)).collect(),
    };
    fs::write(path, raster.encode()).map_err(|e| Error::io(path, e))
}

/// Writes `gradcam.pgm` (the normalized class activation map of the
/// predicted class, upsampled to the input size) and `group_XX.pgm` for
/// every group map into `out_dir`. `x` is one `C×H×W` image.
pub fn export_heatmap(
    model: &Model,
    x: &Tensor,
    config: &TenetConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<HeatmapFiles> {
    let (h, w) = match *x.shape() {
        [_, h, w] => (h, w),
        ref s => return Err(Error::dim("export_heatmap", format!("expected C×H×W, got {s:?}"))),
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let a = model.features(&Tensor::new(shape, x.data().to_vec())?)?;
    let (probe, analyses) = analyze(model, &a, config, seed)?;
    let sample = a.slice_outer(0)?;
    let (ha, wa) = (sample.shape()[1], sample.shape()[2]);

    let cam = class_activation_map(&sample, &probe.weights[0])?;
    let gradcam = out_dir.join("gradcam.pgm");
    write_gray(&gradcam, &upsample_bilinear(cam.data(), ha, wa, h, w), h, w)?;

    let maps = &analyses[0].maps;
    let mut groups = Vec::with_capacity(maps.shape()[0]);
    for (l, m) in maps.data().chunks(ha * wa).enumerate() {
        let path = out_dir.join(format!("group_{l:02}.pgm"));
        write_gray(&path, &upsample_bilinear(&normalized(m), ha, wa, h, w), h, w)?;
        groups.push(path);
    }
    Ok(HeatmapFiles {
        gradcam,
        groups,
        predicted: probe.predicted[0],
    })
}
