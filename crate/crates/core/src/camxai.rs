//! Grad-CAM and Finer-CAM saliency on the last c2f block.
//!
//! The gradient objective is J = f_c − γ·Σ f_c' over the contrastive
//! classes. Channel weights α_k are spatial means of ∂J/∂A_k and the map is
//! ReLU(Σ_k α_k·A_k).

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::micronet::layers::{global_avg_pool, global_avg_pool_backward, Mode};
use crate::micronet::model::{Head, Model};
use crate::micronet::tensor::Tensor;
use crate::raster::{read_pgm, write_pgm16, write_png_rgb, GrayImage};

/// Upsampling factor from the last c2f block to the input resolution.
pub const UPSAMPLE_FACTOR: usize = 32;
/// Number of runner-up classes used as contrasts.
pub const MAX_CONTRASTIVE: usize = 3;
/// Layer name recorded in map sidecars.
pub const TARGET_LAYER: &str = "last_c2f";

pub const PURPLE: [u8; 3] = [68, 1, 84];
pub const YELLOW: [u8; 3] = [253, 231, 37];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamRequest {
    pub target: usize,
    pub contrastive: Vec<usize>,
    pub gamma: f64,
}

impl CamRequest {
    pub fn grad_cam(target: usize) -> Self {
        Self {
            target,
            contrastive: Vec::new(),
            gamma: 0.0,
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.target >= classes {
            return Err(Error::InvalidArgument(format!(
                "target class {} out of {classes}",
                self.target
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!(
                "gamma {} outside [0, 1]",
                self.gamma
            )));
        }
        if self.contrastive.len() > MAX_CONTRASTIVE {
            return Err(Error::InvalidArgument(format!(
                "{} contrastive classes, at most {MAX_CONTRASTIVE}",
                self.contrastive.len()
            )));
        }
        for &c in &self.contrastive {
            if c == self.target || c >= classes {
                return Err(Error::InvalidArgument(format!("bad contrastive class {c}")));
            }
        }
        Ok(())
    }

    /// ∂J/∂logits.
    pub fn objective_gradient(&self, classes: usize) -> Vec<f64> {
        let mut g = vec![0.0; classes];
        g[self.target] = 1.0;
        if self.gamma != 0.0 {
            for &c in &self.contrastive {
                g[c] -= self.gamma;
            }
        }
        g
    }
}

/// Classes ranked by logit, descending; ties go to the lower index.
pub fn rank_classes(logits: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order
}

/// The classes ranked second to fourth. `target` must rank first.
pub fn select_contrastive(logits: &[f64], target: usize) -> Result<Vec<usize>> {
    let order = rank_classes(logits);
    if order.first() != Some(&target) {
        return Err(Error::Precondition(format!(
            "target class {target} is not the top-ranked class"
        )));
    }
    Ok(order.into_iter().skip(1).take(MAX_CONTRASTIVE).collect())
}

/// The part of a network that maps target-layer activations to logits.
pub trait ScoreHead {
    /// Logits for a single-sample activation (1, C, h, w).
    fn scores(&mut self, activation: &Tensor) -> Result<Vec<f64>>;
    /// Gradient of Σ g_k·logit_k with respect to the activation.
    fn activation_gradient(&mut self, activation: &Tensor, grad_logits: &[f64]) -> Result<Tensor>;
}

impl ScoreHead for Head {
    fn scores(&mut self, activation: &Tensor) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self
            .forward(activation, Mode::Eval, &mut rng)?
            .sample(0)
            .to_vec())
    }

    fn activation_gradient(&mut self, activation: &Tensor, grad_logits: &[f64]) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.forward(activation, Mode::Eval, &mut rng)?;
        let g = Tensor::from_vec([1, grad_logits.len(), 1, 1], grad_logits.to_vec())?;
        Ok(self.backward(&g))
    }
}

/// Global average pooling followed by an affine map, with no nonlinearity.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// Row-major (classes, channels).
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    fn channels(&self) -> usize {
        self.weight.len() / self.bias.len()
    }
}

impl ScoreHead for LinearHead {
    fn scores(&mut self, activation: &Tensor) -> Result<Vec<f64>> {
        let c = self.channels();
        if activation.channels() != c {
            return Err(Error::Shape(format!("linear head expects {c} channels")));
        }
        let pooled = global_avg_pool(activation);
        Ok(self
            .weight
            .chunks(c)
            .zip(&self.bias)
            .map(|(row, b)| {
                b + row
                    .iter()
                    .zip(pooled.sample(0))
                    .map(|(w, v)| w * v)
                    .sum::<f64>()
            })
            .collect())
    }

    fn activation_gradient(&mut self, activation: &Tensor, grad_logits: &[f64]) -> Result<Tensor> {
        let c = self.channels();
        let mut pooled_grad = vec![0.0; c];
        for (row, g) in self.weight.chunks(c).zip(grad_logits) {
            for (p, w) in pooled_grad.iter_mut().zip(row) {
                *p += g * w;
            }
        }
        let g = Tensor::from_vec([1, c, 1, 1], pooled_grad)?;
        Ok(global_avg_pool_backward(&g, activation.shape()))
    }
}

/// Map at the spatial size of the target layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LowResCam {
    pub map: GrayImage,
    pub alpha: Vec<f64>,
}

/// Finer-CAM from a recorded activation (1, C, h, w).
pub fn cam_from_activation<H: ScoreHead>(
    head: &mut H,
    activation: &Tensor,
    req: &CamRequest,
) -> Result<LowResCam> {
    if activation.batch() != 1 {
        return Err(Error::Shape(
            "CAM expects a single-sample activation".into(),
        ));
    }
    let classes = head.scores(activation)?.len();
    req.validate(classes)?;
    let grad = head.activation_gradient(activation, &req.objective_gradient(classes))?;
    let [_, c, h, w] = activation.shape();
    let plane = (h * w) as f64;
    let alpha: Vec<f64> = (0..c)
        .map(|k| grad.channel(0, k).iter().sum::<f64>() / plane)
        .collect();
    let mut values = vec![0.0; h * w];
    for (k, a) in alpha.iter().enumerate() {
        for (v, x) in values.iter_mut().zip(activation.channel(0, k)) {
            *v += a * x;
        }
    }
    values.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(LowResCam {
        map: GrayImage {
            width: w,
            height: h,
            values,
        },
        alpha,
    })
}

/// Everything computed for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CamResult {
    pub logits: Vec<f64>,
    pub low_res: LowResCam,
}

/// Runs the backbone on one image (values in [0, 1], row-major square) and
/// computes the requested map.
pub fn finer_cam(model: &mut Model, pixels: &[f64], req: &CamRequest) -> Result<CamResult> {
    let side = model.config.input_side;
    let x = Tensor::from_vec([1, 1, side, side], pixels.to_vec())?;
    let activation = model.forward_backbone(&x, Mode::Eval)?;
    let logits = model.head.scores(&activation)?;
    let low_res = cam_from_activation(&mut model.head, &activation, req)?;
    Ok(CamResult { logits, low_res })
}

/// Recorded activation and logits of one image, reusable for several
/// requests.
pub fn activation_of(model: &mut Model, pixels: &[f64]) -> Result<(Tensor, Vec<f64>)> {
    let side = model.config.input_side;
    let x = Tensor::from_vec([1, 1, side, side], pixels.to_vec())?;
    let activation = model.forward_backbone(&x, Mode::Eval)?;
    let logits = model.head.scores(&activation)?;
    Ok((activation, logits))
}

/// Bilinear upsampling with half-pixel centres, source coordinates
/// clamped to the border.
pub fn bilinear_upsample(map: &GrayImage, factor: usize) -> Result<GrayImage> {
    if factor == 0 {
        return Err(Error::InvalidArgument(
            "upsampling factor must be at least 1".into(),
        ));
    }
    let (w, h) = (map.width, map.height);
    let src = |dst: usize, len: usize| {
        let s = ((dst as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, s - i0 as f64)
    };
    let cols: Vec<_> = (0..w * factor).map(|c| src(c, w)).collect();
    let rows: Vec<_> = (0..h * factor).map(|r| src(r, h)).collect();
    let mut values = Vec::with_capacity(w * h * factor * factor);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            let top = map.get(c0, r0) * (1.0 - fx) + map.get(c1, r0) * fx;
            let bottom = map.get(c0, r1) * (1.0 - fx) + map.get(c1, r1) * fx;
            values.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(GrayImage {
        width: w * factor,
        height: h * factor,
        values,
    })
}

/// Min-max scaling to [0, 1]. An all-zero map stays zero; any other
/// constant map becomes all ones.
pub fn normalize_minmax(map: &mut GrayImage) {
    let (lo, hi) = (map.min(), map.max());
    if hi > lo {
        map.values
            .iter_mut()
            .for_each(|v| *v = (*v - lo) / (hi - lo));
    } else if hi != 0.0 {
        map.values.iter_mut().for_each(|v| *v = 1.0);
    }
}

/// Normalised saliency at input resolution plus the request it answers.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub image: GrayImage,
    pub request: CamRequest,
}

pub fn saliency_map(low: &LowResCam, factor: usize, request: CamRequest) -> Result<SaliencyMap> {
    let mut image = bilinear_upsample(&low.map, factor)?;
    normalize_minmax(&mut image);
    Ok(SaliencyMap { image, request })
}

/// Colour overlay: the projection in a purple tint, blended towards yellow
/// by saliency. With a threshold, pixels below it show the tint only.
pub fn overlay(base: &GrayImage, map: &GrayImage, threshold: Option<f64>) -> Result<Vec<u8>> {
    if (base.width, base.height) != (map.width, map.height) {
        return Err(Error::Shape(format!(
            "overlay of {}x{} map on {}x{} image",
            map.width, map.height, base.width, base.height
        )));
    }
    let mut out = Vec::with_capacity(3 * base.values.len());
    for (&b, &m) in base.values.iter().zip(&map.values) {
        let m = match threshold {
            Some(t) if m < t => 0.0,
            _ => m.clamp(0.0, 1.0),
        };
        let b = b.clamp(0.0, 1.0);
        for ch in 0..3 {
            let tint = f64::from(PURPLE[ch]) + b * (255.0 - f64::from(PURPLE[ch]));
            let v = (1.0 - m) * tint + m * f64::from(YELLOW[ch]);
            out.push(v.round() as u8);
        }
    }
    Ok(out)
}

pub fn write_overlay(
    path: &Path,
    base: &GrayImage,
    map: &GrayImage,
    threshold: Option<f64>,
) -> Result<()> {
    let rgb = overlay(base, map, threshold)?;
    write_png_rgb(path, base.width, base.height, &rgb)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSidecar {
    pub target: usize,
    pub contrastive: Vec<usize>,
    pub gamma: f64,
    pub layer: String,
    pub width: usize,
    pub height: usize,
}

pub fn sidecar_path(map_path: &Path) -> PathBuf {
    let mut s = map_path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// 16-bit PGM (value·65535) plus a JSON sidecar next to it.
pub fn save_saliency(path: &Path, map: &SaliencyMap) -> Result<()> {
    let samples: Vec<u16> = map
        .image
        .values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    write_pgm16(path, map.image.width, map.image.height, &samples)?;
    let side = MapSidecar {
        target: map.request.target,
        contrastive: map.request.contrastive.clone(),
        gamma: map.request.gamma,
        layer: TARGET_LAYER.to_string(),
        width: map.image.width,
        height: map.image.height,
    };
    let json =
        serde_json::to_string_pretty(&side).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let sp = sidecar_path(path);
    fs::write(&sp, json).map_err(|e| Error::io(&sp, e))
}

pub fn load_saliency(path: &Path) -> Result<SaliencyMap> {
    let pgm = read_pgm(path)?;
    let sp = sidecar_path(path);
    let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let side: MapSidecar = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: sp.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    Ok(SaliencyMap {
        image: pgm.to_gray(),
        request: CamRequest {
            target: side.target,
            contrastive: side.contrastive,
            gamma: side.gamma,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micronet::model::ModelConfig;
    use proptest::prelude::*;
    use rand::Rng;

    fn tensor(shape: [usize; 4], data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn contrastive_examples() {
        assert_eq!(
            select_contrastive(&[5.0, 3.0, 4.0, 1.0, 2.0, 0.0, -1.0], 0).unwrap(),
            vec![2, 1, 4]
        );
        assert_eq!(
            select_contrastive(&[6.0, 5.0, 4.0, 3.0, 2.0], 0).unwrap(),
            vec![1, 2, 3]
        );
        assert_eq!(
            select_contrastive(&[1.0, 3.0, 3.0, 3.0, 3.0], 1).unwrap(),
            vec![2, 3, 4]
        );
        assert_eq!(select_contrastive(&[2.0, 1.0], 0).unwrap(), vec![1]);
        assert!(matches!(
            select_contrastive(&[1.0, 2.0], 0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn request_validation() {
        assert!(CamRequest {
            target: 0,
            contrastive: vec![0],
            gamma: 1.0
        }
        .validate(3)
        .is_err());
        assert!(CamRequest {
            target: 0,
            contrastive: vec![1],
            gamma: 1.5
        }
        .validate(3)
        .is_err());
        assert!(CamRequest {
            target: 3,
            contrastive: vec![],
            gamma: 0.0
        }
        .validate(3)
        .is_err());
        CamRequest {
            target: 0,
            contrastive: vec![1, 2],
            gamma: 1.0,
        }
        .validate(3)
        .unwrap();
    }

    #[test]
    fn hand_computed_linear_head() {
        // logits_k = w_k·mean(A) + b_k, J = f_0 − (f_1 + f_2)
        // ∂J/∂A_ij = (2 − 0.5 − 1)/4 = 0.125 = α, map = 0.125·A.
        let mut head = LinearHead {
            weight: vec![2.0, 0.5, 1.0],
            bias: vec![0.1, -0.2, 0.3],
        };
        let a = tensor([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let req = CamRequest {
            target: 0,
            contrastive: vec![1, 2],
            gamma: 1.0,
        };
        let cam = cam_from_activation(&mut head, &a, &req).unwrap();
        assert!((cam.alpha[0] - 0.125).abs() < 1e-12);
        for (v, e) in cam.map.values.iter().zip([0.125, 0.25, 0.375, 0.5]) {
            assert!((v - e).abs() < 1e-12);
        }
        let grad = head
            .activation_gradient(&a, &req.objective_gradient(3))
            .unwrap();
        let j = |h: &mut LinearHead, t: &Tensor| {
            let s = h.scores(t).unwrap();
            s[0] - s[1] - s[2]
        };
        for i in 0..4 {
            let mut p = a.clone();
            p.data_mut()[i] += 1e-6;
            let mut m = a.clone();
            m.data_mut()[i] -= 1e-6;
            let fd = (j(&mut head, &p) - j(&mut head, &m)) / 2e-6;
            assert!((fd - grad.data()[i]).abs() / grad.data()[i].abs() < 1e-6);
        }
    }

    #[test]
    fn negative_evidence_is_clipped() {
        let mut head = LinearHead {
            weight: vec![-1.0, 0.0],
            bias: vec![0.0, 0.0],
        };
        let a = tensor([1, 1, 2, 2], vec![1.0, -2.0, 3.0, 0.0]);
        let cam = cam_from_activation(&mut head, &a, &CamRequest::grad_cam(0)).unwrap();
        assert_eq!(cam.map.values, vec![0.0, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut head = Head::new(3, 4, 5, 0.0, &mut rng);
        let a = tensor(
            [1, 3, 2, 2],
            (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let req = CamRequest {
            target: 2,
            contrastive: vec![0, 4, 1],
            gamma: 0.7,
        };
        let g = req.objective_gradient(5);
        let analytic = head.activation_gradient(&a, &g).unwrap();
        let j = |h: &mut Head, t: &Tensor| {
            h.scores(t)
                .unwrap()
                .iter()
                .zip(&g)
                .map(|(s, w)| s * w)
                .sum::<f64>()
        };
        let (mut diff, mut norm) = (0.0, 0.0);
        for i in 0..12 {
            let mut p = a.clone();
            p.data_mut()[i] += 1e-6;
            let mut m = a.clone();
            m.data_mut()[i] -= 1e-6;
            let fd = (j(&mut head, &p) - j(&mut head, &m)) / 2e-6;
            diff += (fd - analytic.data()[i]).powi(2);
            norm += analytic.data()[i].powi(2);
        }
        assert!((diff / norm).sqrt() < 1e-6);
    }

    #[test]
    fn zero_activation_gives_zero_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut head = Head::new(2, 3, 4, 0.0, &mut rng);
        let a = Tensor::zeros([1, 2, 3, 3]);
        let cam = cam_from_activation(
            &mut head,
            &a,
            &CamRequest {
                target: 1,
                contrastive: vec![0, 2],
                gamma: 1.0,
            },
        )
        .unwrap();
        assert!(cam.map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_head_alpha_scales_with_class_weights() {
        let mut head = LinearHead {
            weight: vec![0.3, -0.7, 1.1, 0.2, 0.5, -0.4],
            bias: vec![0.0, 0.0],
        };
        let a = tensor(
            [1, 3, 2, 2],
            (0..12).map(|i| (i as f64 * 0.37).sin()).collect(),
        );
        let base = cam_from_activation(&mut head, &a, &CamRequest::grad_cam(0))
            .unwrap()
            .alpha;
        for w in head.weight[..3].iter_mut() {
            *w *= 2.5;
        }
        let scaled = cam_from_activation(&mut head, &a, &CamRequest::grad_cam(0))
            .unwrap()
            .alpha;
        for (b, s) in base.iter().zip(&scaled) {
            assert!((2.5 * b - s).abs() < 1e-12);
        }
    }

    fn tiny_model() -> Model {
        Model::new(ModelConfig {
            widths: [2, 2, 4, 4, 4],
            bottlenecks: [1, 1, 1, 1],
            head_channels: 6,
            input_side: 64,
            init_seed: 3,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn gamma_zero_and_empty_set_equal_grad_cam_on_a_model() {
        let mut model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let px: Vec<f64> = (0..64 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
            let (act, logits) = activation_of(&mut model, &px).unwrap();
            let top = rank_classes(&logits)[0];
            let plain =
                cam_from_activation(&mut model.head, &act, &CamRequest::grad_cam(top)).unwrap();
            let contrast = select_contrastive(&logits, top).unwrap();
            let g0 = CamRequest {
                target: top,
                contrastive: contrast,
                gamma: 0.0,
            };
            assert_eq!(
                cam_from_activation(&mut model.head, &act, &g0).unwrap(),
                plain
            );
            let via_model = finer_cam(&mut model, &px, &CamRequest::grad_cam(top)).unwrap();
            assert_eq!(via_model.low_res, plain);
            assert_eq!(via_model.logits, logits);
        }
    }

    #[test]
    fn upsample_examples() {
        let m = GrayImage {
            width: 2,
            height: 2,
            values: vec![0.0, 1.0, 0.0, 1.0],
        };
        let up = bilinear_upsample(&m, 2).unwrap();
        for row in up.values.chunks(4) {
            assert_eq!(row, &[0.0, 0.25, 0.75, 1.0]);
        }
        let one = GrayImage {
            width: 1,
            height: 1,
            values: vec![0.3],
        };
        assert!(bilinear_upsample(&one, 32)
            .unwrap()
            .values
            .iter()
            .all(|&v| v == 0.3));
        assert_eq!(bilinear_upsample(&m, 1).unwrap(), m);
        assert!(bilinear_upsample(&m, 0).is_err());
    }

    #[test]
    fn normalisation_rules() {
        let mut z = GrayImage::new(3, 3);
        normalize_minmax(&mut z);
        assert!(z.values.iter().all(|&v| v == 0.0));
        let mut c = GrayImage {
            width: 2,
            height: 1,
            values: vec![0.4, 0.4],
        };
        normalize_minmax(&mut c);
        assert_eq!(c.values, vec![1.0, 1.0]);
        let mut r = GrayImage {
            width: 3,
            height: 1,
            values: vec![0.0, 0.5, 2.0],
        };
        normalize_minmax(&mut r);
        assert_eq!(r.values, vec![0.0, 0.25, 1.0]);
    }

    #[test]
    fn overlay_examples() {
        let base = GrayImage {
            width: 2,
            height: 1,
            values: vec![0.0, 1.0],
        };
        let zero = GrayImage::new(2, 1);
        assert_eq!(
            overlay(&base, &zero, None).unwrap(),
            vec![68, 1, 84, 255, 255, 255]
        );
        let hot = GrayImage {
            width: 2,
            height: 1,
            values: vec![1.0, 0.0],
        };
        assert_eq!(&overlay(&base, &hot, None).unwrap()[..3], &YELLOW);
        let below = GrayImage {
            width: 2,
            height: 1,
            values: vec![0.41, 0.42],
        };
        let o = overlay(&base, &below, Some(0.42)).unwrap();
        assert_eq!(&o[..3], &PURPLE);
        assert_ne!(&o[3..], &[255, 255, 255]);
        assert!(overlay(&base, &GrayImage::new(1, 1), None).is_err());
    }

    #[test]
    fn saliency_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let map = SaliencyMap {
            image: GrayImage {
                width: 2,
                height: 2,
                values: vec![0.0, 1.0, 0.5, 0.25],
            },
            request: CamRequest {
                target: 2,
                contrastive: vec![1, 0, 4],
                gamma: 1.0,
            },
        };
        save_saliency(&p, &map).unwrap();
        let back = load_saliency(&p).unwrap();
        assert_eq!(back.request, map.request);
        for (a, b) in back.image.values.iter().zip(&map.image.values) {
            assert!((a - b).abs() <= 0.5 / 65535.0);
        }
        let side: MapSidecar =
            serde_json::from_str(&fs::read_to_string(sidecar_path(&p)).unwrap()).unwrap();
        assert_eq!(side.layer, TARGET_LAYER);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn maps_are_non_negative(seed in any::<u64>(), gamma in 0.0..=1.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut head = Head::new(3, 4, 7, 0.0, &mut rng);
            let a = tensor([1, 3, 3, 3], (0..27).map(|_| rng.random_range(-2.0..2.0)).collect());
            let logits = head.scores(&a).unwrap();
            let top = rank_classes(&logits)[0];
            let req = CamRequest { target: top, contrastive: select_contrastive(&logits, top).unwrap(), gamma };
            let cam = cam_from_activation(&mut head, &a, &req).unwrap();
            prop_assert!(cam.map.values.iter().all(|&v| v >= 0.0));
            let s = saliency_map(&cam, 4, req).unwrap();
            prop_assert!(s.image.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn upsampling_stays_within_source_range(w in 1usize..5, h in 1usize..5, f in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = GrayImage { width: w, height: h, values: (0..w * h).map(|_| rng.random_range(0.0..3.0)).collect() };
            let up = bilinear_upsample(&m, f).unwrap();
            prop_assert_eq!((up.width, up.height), (w * f, h * f));
            prop_assert!(up.max() <= m.max() + 1e-12 && up.min() >= m.min() - 1e-12);
            if f % 2 == 1 {
                // Odd factors sample every source pixel centre exactly.
                prop_assert!((up.max() - m.max()).abs() < 1e-12);
                prop_assert!((up.min() - m.min()).abs() < 1e-12);
            }
        }
    }
}
