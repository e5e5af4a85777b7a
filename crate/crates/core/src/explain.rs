//! Grad-CAM heatmaps from the last convolutional stage and their
//! red-important / blue-unimportant overlays.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imageio::{load_image, save_png};
use crate::network::{Model, NUM_CLASSES};
use crate::ops;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// Importance at input resolution, `[S,S]`, values in `[0,1]`.
    pub values: Tensor<f32>,
    /// Normalized map at feature-map resolution, before resizing.
    pub coarse: Tensor<f32>,
    pub class_index: usize,
    pub image_id: String,
}

/// Gradient-weighted class activation map from a feature stack `[K,h,w]`
/// and the gradient of the class logit with respect to it.
///
/// Channel weights are the spatial means of the gradient; the weighted sum
/// is rectified, min-max normalized (all zeros when constant), then resized.
pub fn grad_cam_from_parts<T: Scalar>(
    activations: &Tensor<T>,
    grads: &Tensor<T>,
    out_size: usize,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let &[k, h, w] = activations.shape() else {
        return Err(Error::Shape {
            op: "grad_cam",
            shape: activations.shape().to_vec(),
            reason: "activations must be [K,h,w]",
        });
    };
    if grads.shape() != activations.shape() {
        return Err(Error::dim("grad_cam", activations.shape(), grads.shape()));
    }
    let plane = h * w;
    let alphas = channel_weights(grads);
    let mut raw = vec![0.0f64; plane];
    for (ch, &alpha) in alphas.iter().enumerate().take(k) {
        let a = &activations.data()[ch * plane..(ch + 1) * plane];
        for (r, &v) in raw.iter_mut().zip(a) {
            *r += alpha * v.as_f64();
        }
    }
    for r in &mut raw {
        *r = r.max(0.0);
    }
    let (min, max) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let normalized: Vec<f32> = if max > min {
        raw.iter().map(|&v| ((v - min) / (max - min)) as f32).collect()
    } else {
        vec![0.0; plane]
    };
    let coarse = Tensor::new(&[h, w], normalized)?;
    let values = ops::bilinear_resize(&coarse, out_size, out_size)?;
    Ok((values, coarse))
}

/// Spatial mean of the gradient per channel.
pub fn channel_weights<T: Scalar>(grads: &Tensor<T>) -> Vec<f64> {
    let plane: usize = grads.shape()[1..].iter().product();
    grads
        .data()
        .chunks(plane)
        .map(|c| c.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64)
        .collect()
}

/// Post-ReLU last-conv activations `[K,h,w]` of one image and the gradient
/// of logit `class_index` with respect to them.
pub fn last_conv_activations_and_grads<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    class_index: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if class_index >= NUM_CLASSES {
        return Err(Error::Argument(format!("class index {class_index} is not 0 or 1")));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let (_, cache) = model.forward(&image.clone().reshape(&shape)?)?;
    let layer = model.last_conv_pool_index();
    let mut seed = Tensor::zeros(&[1, NUM_CLASSES]);
    seed.data_mut()[class_index] = T::one();
    let grad = model.input_grad(&cache, seed, layer)?;
    let act = cache.layer_input(layer);
    let inner = act.shape()[1..].to_vec();
    Ok((act.clone().reshape(&inner)?, grad.reshape(&inner)?))
}

pub fn grad_cam(model: &Model<f32>, image: &Tensor<f32>, class_index: usize, image_id: &str) -> Result<Heatmap> {
    let (act, grad) = last_conv_activations_and_grads(model, image, class_index)?;
    let (values, coarse) = grad_cam_from_parts(&act, &grad, model.input_size())?;
    Ok(Heatmap {
        values,
        coarse,
        class_index,
        image_id: image_id.to_string(),
    })
}

pub const DEFAULT_ALPHA: f32 = 0.4;

/// Five evenly spaced stops: blue, cyan, green, yellow, red.
pub const COLORMAP_STOPS: [[f32; 3]; 5] = [
    [0.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [0.0, 1.0, 0.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 0.0],
];

pub fn colormap(v: f32) -> [f32; 3] {
    let x = v.clamp(0.0, 1.0) * 4.0;
    let i = (x.floor() as usize).min(3);
    let f = x - i as f32;
    let (a, b) = (COLORMAP_STOPS[i], COLORMAP_STOPS[i + 1]);
    [
        a[0] + f * (b[0] - a[0]),
        a[1] + f * (b[1] - a[1]),
        a[2] + f * (b[2] - a[2]),
    ]
}

/// `(1 − alpha)·image + alpha·colormap(heatmap)` for a `[3,S,S]` image.
pub fn render_overlay(heatmap: &Tensor<f32>, image: &Tensor<f32>, alpha: f32) -> Result<Tensor<f32>> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Argument(format!("alpha {alpha} outside [0, 1)")));
    }
    let (h, w) = match (heatmap.shape(), image.shape()) {
        (&[h, w], &[3, ih, iw]) if h == ih && w == iw => (h, w),
        _ => return Err(Error::dim("render_overlay", heatmap.shape(), image.shape())),
    };
    let plane = h * w;
    if alpha == 0.0 {
        return Ok(image.clone());
    }
    let mut out = image.clone();
    let data = out.data_mut();
    for (i, &v) in heatmap.data().iter().enumerate() {
        let rgb = colormap(v);
        for (c, &col) in rgb.iter().enumerate() {
            let px = &mut data[c * plane + i];
            *px = ((1.0 - alpha) * *px + alpha * col).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

pub fn write_heatmap_csv_to<W: Write>(mut w: W, map: &Tensor<f32>) -> std::io::Result<()> {
    let cols = map.shape()[1];
    for row in map.data().chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()
}

/// Which class a heatmap explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassTarget {
    Predicted,
    Fixed(usize),
}

impl std::str::FromStr for ClassTarget {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "predicted" => Ok(ClassTarget::Predicted),
            "0" => Ok(ClassTarget::Fixed(0)),
            "1" => Ok(ClassTarget::Fixed(1)),
            other => Err(format!("invalid class '{other}' (expected predicted, 0 or 1)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainItem {
    pub image_id: String,
    pub path: PathBuf,
}

#[derive(Debug, Default)]
pub struct ExplainReport {
    pub written: Vec<PathBuf>,
    pub failures: Vec<(String, Error)>,
}

/// Writes `<image_id>_<class>.png` (overlay) and `<image_id>_<class>.csv`
/// (raw heatmap) for every item. Failures are collected per image and do
/// not stop the batch.
pub fn explain_batch(
    model: &Model<f32>,
    items: &[ExplainItem],
    target: ClassTarget,
    alpha: f32,
    out_dir: &Path,
) -> Result<ExplainReport> {
    let mut report = ExplainReport::default();
    if items.is_empty() {
        return Ok(report);
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for item in items {
        match explain_one(model, item, target, alpha, out_dir) {
            Ok(paths) => report.written.extend(paths),
            Err(e) => report.failures.push((item.image_id.clone(), e)),
        }
    }
    Ok(report)
}

fn explain_one(
    model: &Model<f32>,
    item: &ExplainItem,
    target: ClassTarget,
    alpha: f32,
    out_dir: &Path,
) -> Result<[PathBuf; 2]> {
    let image = load_image(&item.path, model.input_size())?;
    let class = match target {
        ClassTarget::Predicted => model.predict(&image)?.class,
        ClassTarget::Fixed(c) => c,
    };
    let heatmap = grad_cam(model, &image, class, &item.image_id)?;
    let overlay = render_overlay(&heatmap.values, &image, alpha)?;
    let stem = format!("{}_{}", item.image_id, class);
    let png = out_dir.join(format!("{stem}.png"));
    let csv = out_dir.join(format!("{stem}.csv"));
    save_png(&png, &overlay)?;
    let file = std::fs::File::create(&csv).map_err(|e| Error::io(&csv, e))?;
    write_heatmap_csv_to(std::io::BufWriter::new(file), &heatmap.values).map_err(|e| Error::io(&csv, e))?;
    Ok([png, csv])
}

/// Share of total heatmap mass inside the given `[y0,y1) × [x0,x1)` window.
pub fn mass_fraction(map: &Tensor<f32>, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> f64 {
    let w = map.shape()[1];
    let total: f64 = map.data().iter().map(|&v| v as f64).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut inside = 0.0;
    for y in rows {
        for x in cols.clone() {
            inside += map.data()[y * w + x] as f64;
        }
    }
    inside / total
}
