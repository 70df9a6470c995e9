//! Grad-CAM saliency: channel weights are the spatial means of the class
//! logit's gradient over a convolutional feature map, and the heat map is
//! the rectified, max-normalized weighted sum of the channels.

use serde::{Deserialize, Serialize};

use crate::augment::resize;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::layers::{Architecture, Graph, Mode, Op};
use crate::models::{as_feed, batch_inputs};
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major values in `[0, 1]`.
    pub values: Vec<f64>,
    pub target: usize,
    pub layer: String,
    /// What was differentiated; always the pre-softmax logit.
    pub gradient_of: String,
}

/// Last convolution node in storage order.
pub fn last_conv_layer(arch: &Architecture) -> Option<usize> {
    arch.nodes()
        .iter()
        .rposition(|n| matches!(n.op, Op::Conv2d { .. } | Op::DepthwiseSepConv { .. }))
}

/// Heat map from one sample's feature maps and their gradients, both
/// `(C, H, W)`.
pub fn gradcam_from_maps(maps: &Tensor, grads: &Tensor) -> Result<Vec<f64>> {
    if maps.ndim() != 3 || maps.shape() != grads.shape() {
        return Err(Error::shape(format!(
            "grad-cam needs matching (C, H, W) maps and gradients, got {:?} and {:?}",
            maps.shape(),
            grads.shape()
        )));
    }
    let hw = maps.shape()[1] * maps.shape()[2];
    if hw == 0 {
        return Err(Error::shape("grad-cam feature map has no spatial extent"));
    }
    let mut cam = vec![0.0; hw];
    for (m, g) in maps.data().chunks_exact(hw).zip(grads.data().chunks_exact(hw)) {
        let alpha = g.iter().sum::<f64>() / hw as f64;
        for (acc, v) in cam.iter_mut().zip(m) {
            *acc += alpha * v;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let max = cam.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        cam.iter_mut().for_each(|v| *v /= max);
    }
    Ok(cam)
}

/// Grad-CAM for one image. `target` defaults to the predicted class and
/// `layer` to the last convolution. The graph runs in inference mode.
pub fn gradcam(
    graph: &mut Graph,
    image: &Image,
    target: Option<usize>,
    layer: Option<&str>,
) -> Result<Heatmap> {
    let arch = graph.arch();
    let tap = match layer {
        Some(name) => arch
            .node_index(name)
            .ok_or_else(|| Error::invalid(format!("no layer named `{name}`")))?,
        None => last_conv_layer(arch)
            .ok_or_else(|| Error::invalid("model has no convolution layer to tap"))?,
    };
    if arch.shapes()[tap].len() != 3 {
        return Err(Error::invalid(format!(
            "layer `{}` has output {:?}, which has no spatial extent",
            arch.nodes()[tap].name,
            arch.shapes()[tap]
        )));
    }
    let layer_name = arch.nodes()[tap].name.clone();
    let inputs = batch_inputs(arch, &[image])?;
    let prev = graph.mode();
    graph.set_mode(Mode::Infer);
    let result = graph.forward(&as_feed(&inputs));
    graph.set_mode(prev);
    result?;
    let logits = graph
        .logits()
        .ok_or_else(|| Error::graph("forward produced no logits"))?
        .clone();
    let k = logits.len();
    let target = target.or_else(|| argmax(logits.data())).unwrap_or(0);
    if target >= k {
        return Err(Error::invalid(format!(
            "target class {target} out of range for {k} classes"
        )));
    }
    let mut seed = Tensor::zeros(logits.shape().to_vec());
    seed.data_mut()[target] = 1.0;
    let out = graph.arch().output();
    let start = match graph.arch().nodes()[out].op {
        Op::Softmax => graph.arch().nodes()[out].inputs[0],
        _ => out,
    };
    let grads = graph.backward_from(start, &seed)?;
    let maps = graph
        .activation(tap)
        .expect("forward cached activations")
        .clone();
    let shape = maps.shape()[1..].to_vec();
    let maps = maps.into_reshaped(shape.clone())?;
    let g = grads.nodes[tap]
        .clone()
        .map(|g| g.into_reshaped(shape.clone()))
        .transpose()?
        .unwrap_or_else(|| Tensor::zeros(shape.clone()));
    Ok(Heatmap {
        height: shape[1],
        width: shape[2],
        values: gradcam_from_maps(&maps, &g)?,
        target,
        layer: layer_name,
        gradient_of: "logit".into(),
    })
}

/// Classic blue-cyan-yellow-red ramp for `t` in `[0, 1]`.
fn jet(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let ch = |offset: f64| (1.5 - (4.0 * t - offset).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

impl Heatmap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Grayscale image at the feature-map extents.
    pub fn to_image(&self) -> Image {
        Image::new(1, self.height, self.width, self.values.clone()).expect("extents match values")
    }

    /// Bilinearly upsampled to `height × width`.
    pub fn upsample(&self, height: usize, width: usize) -> Result<Image> {
        resize(&self.to_image(), height, width)
    }

    /// Color-mapped heat map blended over `base` with opacity `alpha`.
    pub fn overlay(&self, base: &Image, alpha: f64) -> Result<Image> {
        let base = base.to_rgb();
        let (h, w) = (base.height(), base.width());
        let heat = self.upsample(h, w)?;
        let mut out = base.clone();
        for y in 0..h {
            for x in 0..w {
                let color = jet(heat.get(0, y, x));
                for (c, col) in color.iter().enumerate() {
                    let v = (1.0 - alpha) * base.get(c, y, x) + alpha * col;
                    out.set(c, y, x, v.clamp(0.0, 1.0));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_positive_gradient_gives_normalized_relu() {
        let maps = Tensor::new(vec![1, 2, 2], vec![1.0, -2.0, 4.0, 2.0]).unwrap();
        let grads = Tensor::full(vec![1, 2, 2], 0.5);
        assert_eq!(
            gradcam_from_maps(&maps, &grads).unwrap(),
            vec![0.25, 0.0, 1.0, 0.5]
        );
        let relu_maps = maps.map(|v| v.max(0.0));
        let neg = Tensor::full(vec![1, 2, 2], -0.5);
        assert_eq!(gradcam_from_maps(&relu_maps, &neg).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn jet_endpoints() {
        assert_eq!(jet(0.0), [0.0, 0.0, 0.5]);
        assert_eq!(jet(1.0), [0.5, 0.0, 0.0]);
    }
}
