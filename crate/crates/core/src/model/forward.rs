//! Lean forward pass for inference: no tape, conv weights packed once so a
//! prepared model can score many patches cheaply.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels;
use crate::ops::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{
    extractor_plan, fuse_features, head_plan, param_shapes, LayerSpec, ModelConfig, ParamSet,
    Task, PoolingMode, PATCH_SIZE,
};

/// Per-patch model output. Weight fields are present only for
/// weighted-pooling configurations.
#[derive(Clone, Copy, Debug)]
pub struct PatchOutput<T> {
    /// Patch quality on the mapped score scale (high = more distorted).
    pub quality: T,
    /// Raw weight-branch output.
    pub raw_weight: Option<T>,
    /// Rectified, stabilized weight; strictly positive when present.
    pub stabilized_weight: Option<T>,
}

struct PackedConv<T> {
    fwd: Vec<T>,
    bias: Vec<T>,
    c_in: usize,
    c_out: usize,
}

/// A validated, packed read-only view of `(config, params)`.
pub struct Forward<'a, T: Scalar> {
    config: &'a ModelConfig,
    params: &'a ParamSet<T>,
    convs: Vec<PackedConv<T>>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(config: &'a ModelConfig, params: &'a ParamSet<T>) -> Result<Self> {
        for (name, shape) in param_shapes(config) {
            let tensor = params.get(&name).ok_or_else(|| {
                Error::Config(format!("parameter set is missing {name}"))
            })?;
            if tensor.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "parameter {name} has shape {:?}, config implies {:?}",
                    tensor.shape(),
                    shape
                )));
            }
        }
        let mut convs = Vec::new();
        let mut conv_no = 0;
        for layer in extractor_plan(config.depth) {
            if let LayerSpec::Conv3 { in_channels, out_channels } = layer {
                conv_no += 1;
                let weight = params.get(&format!("feat.conv{conv_no}.weight")).unwrap();
                let bias = params.get(&format!("feat.conv{conv_no}.bias")).unwrap();
                let packed = kernels::pack_conv_weight(weight.data(), out_channels, in_channels);
                convs.push(PackedConv {
                    fwd: packed.fwd,
                    bias: bias.data().to_vec(),
                    c_in: in_channels,
                    c_out: out_channels,
                });
            }
        }
        Ok(Forward { config, params, convs })
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    /// Runs the extractor on a `[3, 32, 32]` patch with values in [0, 1].
    pub fn extract_features(&self, patch: &Tensor<T>) -> Result<Tensor<T>> {
        if patch.shape() != [3, PATCH_SIZE, PATCH_SIZE] {
            return Err(Error::Dimension(format!(
                "patch must have shape [3, {PATCH_SIZE}, {PATCH_SIZE}], got {:?}",
                patch.shape()
            )));
        }
        let (mut h, mut w, mut c) = (PATCH_SIZE, PATCH_SIZE, 3usize);
        let mut cur = vec![T::zero(); patch.len()];
        kernels::chw_to_hwc(patch.data(), c, h, w, &mut cur);
        let mut pad = Vec::new();
        let mut conv_no = 0;
        for layer in extractor_plan(self.config.depth) {
            match layer {
                LayerSpec::Conv3 { .. } => {
                    let packed = &self.convs[conv_no];
                    conv_no += 1;
                    kernels::pad_hwc(&cur, h, w, c, &mut pad);
                    let mut out = vec![T::zero(); h * w * packed.c_out];
                    kernels::conv3x3_fwd_hwc(
                        &pad, h, w, packed.c_in, &packed.fwd, &packed.bias, packed.c_out, &mut out,
                    );
                    cur = out;
                    c = packed.c_out;
                }
                LayerSpec::Relu => {
                    for v in cur.iter_mut() {
                        if *v < T::zero() {
                            *v = T::zero();
                        }
                    }
                }
                LayerSpec::MaxPool2 => {
                    let (oh, ow) = (h / 2, w / 2);
                    let mut out = vec![T::zero(); oh * ow * c];
                    let mut idx = vec![0u8; oh * ow * c];
                    kernels::maxpool2x2_fwd_hwc(&cur, h, w, c, &mut out, &mut idx);
                    cur = out;
                    h = oh;
                    w = ow;
                }
                _ => unreachable!("extractor has no fc/dropout layers"),
            }
        }
        debug_assert_eq!((h, w), (1, 1));
        Tensor::new(vec![c], cur)
    }

    fn run_head(
        &self,
        prefix: &str,
        fused: &Tensor<T>,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<T> {
        if fused.len() != self.config.fused_dim() {
            return Err(Error::Dimension(format!(
                "regression input has length {}, config implies {}",
                fused.len(),
                self.config.fused_dim()
            )));
        }
        let mut cur = fused.clone();
        let mut fc_no = 0;
        for layer in head_plan(self.config) {
            match layer {
                LayerSpec::Fc { .. } => {
                    fc_no += 1;
                    let weight = self.params.get(&format!("{prefix}.fc{fc_no}.weight")).unwrap();
                    let bias = self.params.get(&format!("{prefix}.fc{fc_no}.bias")).unwrap();
                    cur = crate::ops::fc_forward(&cur, weight, bias)?;
                }
                LayerSpec::Relu => cur = crate::ops::relu_forward(&cur),
                LayerSpec::Dropout { keep } => match mode {
                    Mode::Eval => cur = cur.map(|v| v * T::from_f64(keep)),
                    Mode::Train => {
                        let rng = rng.as_deref_mut().ok_or_else(|| {
                            Error::State("train-mode forward requires a dropout generator".into())
                        })?;
                        cur = crate::ops::dropout_apply(&cur, keep, Mode::Train, rng);
                    }
                },
                _ => unreachable!("head has no conv/pool layers"),
            }
        }
        cur.item()
    }

    /// Quality branch: fused features to the patch quality scalar.
    pub fn regress_quality(
        &self,
        fused: &Tensor<T>,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<T> {
        self.run_head("q", fused, mode, rng)
    }

    /// Weight branch: fused features to `(alpha, alpha_star)` where
    /// `alpha_star = max(0, alpha) + epsilon` is strictly positive.
    pub fn regress_weight(
        &self,
        fused: &Tensor<T>,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(T, T)> {
        if self.config.pooling != PoolingMode::Weighted {
            return Err(Error::Config(
                "weight regression requires a weighted-pooling configuration".into(),
            ));
        }
        let alpha = self.run_head("w", fused, mode, rng)?;
        let eps = T::from_f64(self.config.epsilon);
        let stabilized = if alpha > T::zero() { alpha + eps } else { eps };
        Ok((alpha, stabilized))
    }

    /// Fuses features per the configured scheme; NR passes the distorted
    /// features straight through.
    pub fn fuse(&self, f_r: Option<&Tensor<T>>, f_d: &Tensor<T>) -> Result<Tensor<T>> {
        match self.config.task {
            Task::Nr => {
                if f_r.is_some() {
                    return Err(Error::Config(
                        "NR configuration does not take reference features".into(),
                    ));
                }
                Ok(f_d.clone())
            }
            Task::Fr => {
                let f_r = f_r.ok_or_else(|| {
                    Error::Config("FR configuration requires reference features".into())
                })?;
                fuse_features(f_r, f_d, self.config.fusion().expect("validated"))
            }
        }
    }

    /// Full evaluation-mode pass over one patch (pair).
    pub fn predict_patch(
        &self,
        distorted: &Tensor<T>,
        reference: Option<&Tensor<T>>,
    ) -> Result<PatchOutput<T>> {
        let f_d = self.extract_features(distorted)?;
        let f_r = match (self.config.task, reference) {
            (Task::Fr, Some(r)) => Some(self.extract_features(r)?),
            (Task::Fr, None) => {
                return Err(Error::Config("FR prediction requires a reference patch".into()))
            }
            (Task::Nr, Some(_)) => {
                return Err(Error::Config("NR prediction does not take a reference patch".into()))
            }
            (Task::Nr, None) => None,
        };
        let fused = self.fuse(f_r.as_ref(), &f_d)?;
        let quality = self.regress_quality(&fused, Mode::Eval, None)?;
        let (raw_weight, stabilized_weight) = if self.config.pooling == PoolingMode::Weighted {
            let (a, s) = self.regress_weight(&fused, Mode::Eval, None)?;
            (Some(a), Some(s))
        } else {
            (None, None)
        };
        Ok(PatchOutput { quality, raw_weight, stabilized_weight })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Depth, Fusion};
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;

    fn nr_cfg(depth: Depth) -> ModelConfig {
        ModelConfig::new(Task::Nr, PoolingMode::Average, None, depth).unwrap()
    }

    fn random_patch(seed: u64) -> Tensor<f32> {
        let mut rng = stream_rng(seed, Stream::Patches);
        Tensor::new(vec![3, 32, 32], (0..3 * 32 * 32).map(|_| rng.gen::<f32>()).collect())
            .unwrap()
    }

    #[test]
    fn feature_lengths_match_depth() {
        for (depth, want) in [(Depth::Full, 512), (Depth::Shallow, 256)] {
            let cfg = nr_cfg(depth);
            let params = init_params::<f32>(&cfg, &mut stream_rng(1, Stream::Init));
            let fwd = Forward::new(&cfg, &params).unwrap();
            let f = fwd.extract_features(&random_patch(2)).unwrap();
            assert_eq!(f.len(), want);
            assert!(f.all_finite());
        }
    }

    #[test]
    fn zero_patch_with_zero_biases_gives_zero_features() {
        let cfg = nr_cfg(Depth::Shallow);
        let params = init_params::<f32>(&cfg, &mut stream_rng(1, Stream::Init));
        // biases are zero-initialized already; zero input then propagates
        let fwd = Forward::new(&cfg, &params).unwrap();
        let f = fwd.extract_features(&Tensor::zeros(vec![3, 32, 32])).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_patch_shape_is_a_dimension_error() {
        let cfg = nr_cfg(Depth::Shallow);
        let params = init_params::<f32>(&cfg, &mut stream_rng(1, Stream::Init));
        let fwd = Forward::new(&cfg, &params).unwrap();
        let bad = Tensor::<f32>::zeros(vec![3, 16, 16]);
        assert!(matches!(fwd.extract_features(&bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn siamese_branches_share_parameters_exactly() {
        let cfg =
            ModelConfig::new(Task::Fr, PoolingMode::Average, Some(Fusion::Diff), Depth::Shallow)
                .unwrap();
        let params = init_params::<f32>(&cfg, &mut stream_rng(5, Stream::Init));
        let fwd = Forward::new(&cfg, &params).unwrap();
        let patch = random_patch(9);
        let f_r = fwd.extract_features(&patch).unwrap();
        let f_d = fwd.extract_features(&patch).unwrap();
        assert_eq!(f_r.data(), f_d.data());
        // identical patches fuse to an exactly zero difference vector
        let fused = fwd.fuse(Some(&f_r), &f_d).unwrap();
        assert!(fused.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let cfg = ModelConfig::new(Task::Nr, PoolingMode::Weighted, None, Depth::Shallow).unwrap();
        let params = init_params::<f32>(&cfg, &mut stream_rng(3, Stream::Init));
        let fwd = Forward::new(&cfg, &params).unwrap();
        let patch = random_patch(4);
        let a = fwd.predict_patch(&patch, None).unwrap();
        let b = fwd.predict_patch(&patch, None).unwrap();
        assert_eq!(a.quality, b.quality);
        assert_eq!(a.stabilized_weight, b.stabilized_weight);
    }

    #[test]
    fn quality_head_zero_input_zero_bias_gives_zero() {
        let cfg = nr_cfg(Depth::Shallow);
        let mut params = init_params::<f32>(&cfg, &mut stream_rng(3, Stream::Init));
        // zero the head weights so the output must be the (zero) bias
        for name in ["q.fc1.weight", "q.fc2.weight"] {
            let t = params.get_mut(name).unwrap();
            t.data_mut().fill(0.0);
        }
        let fwd = Forward::new(&cfg, &params).unwrap();
        let fused = Tensor::<f32>::zeros(vec![cfg.fused_dim()]);
        assert_eq!(fwd.regress_quality(&fused, Mode::Eval, None).unwrap(), 0.0);
    }

    #[test]
    fn regress_quality_matches_layer_composition() {
        let cfg = nr_cfg(Depth::Shallow);
        let params = init_params::<f64>(&cfg, &mut stream_rng(8, Stream::Init));
        let fwd = Forward::new(&cfg, &params).unwrap();
        let mut rng = stream_rng(2, Stream::Patches);
        let fused = Tensor::new(
            vec![cfg.fused_dim()],
            (0..cfg.fused_dim()).map(|_| rng.gen::<f64>() - 0.5).collect(),
        )
        .unwrap();
        let got = fwd.regress_quality(&fused, Mode::Eval, None).unwrap();

        // independent composition from the standalone ops
        let h = crate::ops::fc_forward(
            &fused,
            params.get("q.fc1.weight").unwrap(),
            params.get("q.fc1.bias").unwrap(),
        )
        .unwrap();
        let h = crate::ops::relu_forward(&h);
        let h = h.map(|v| v * 0.5); // eval-mode dropout scaling
        let out = crate::ops::fc_forward(
            &h,
            params.get("q.fc2.weight").unwrap(),
            params.get("q.fc2.bias").unwrap(),
        )
        .unwrap();
        assert!((got - out.item().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn weight_branch_follows_stabilization_rule() {
        let cfg = ModelConfig::new(Task::Nr, PoolingMode::Weighted, None, Depth::Shallow)
            .unwrap()
            .with_epsilon(1e-6);
        let mut params = init_params::<f64>(&cfg, &mut stream_rng(3, Stream::Init));
        // Force alpha = bias by zeroing the weight branch matrices.
        for name in ["w.fc1.weight", "w.fc2.weight"] {
            params.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let fused = Tensor::<f64>::zeros(vec![cfg.fused_dim()]);

        for (bias, want) in [(-3.0, 1e-6), (2.0, 2.0 + 1e-6)] {
            params.get_mut("w.fc2.bias").unwrap().data_mut()[0] = bias;
            let fwd = Forward::new(&cfg, &params).unwrap();
            let (alpha, alpha_star) = fwd.regress_weight(&fused, Mode::Eval, None).unwrap();
            assert_eq!(alpha, bias);
            assert!((alpha_star - want).abs() < 1e-15);
            assert!(alpha_star > 0.0);
        }
    }

    #[test]
    fn weight_branch_requires_weighted_pooling() {
        let cfg = nr_cfg(Depth::Shallow);
        let params = init_params::<f32>(&cfg, &mut stream_rng(3, Stream::Init));
        let fwd = Forward::new(&cfg, &params).unwrap();
        let fused = Tensor::<f32>::zeros(vec![cfg.fused_dim()]);
        assert!(matches!(
            fwd.regress_weight(&fused, Mode::Eval, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn branches_have_disjoint_parameters() {
        let cfg = ModelConfig::new(Task::Nr, PoolingMode::Weighted, None, Depth::Shallow).unwrap();
        let params = init_params::<f32>(&cfg, &mut stream_rng(3, Stream::Init));
        let q = params.get("q.fc1.weight").unwrap();
        let w = params.get("w.fc1.weight").unwrap();
        assert_eq!(q.shape(), w.shape());
        assert_ne!(q.data(), w.data());
    }
}
