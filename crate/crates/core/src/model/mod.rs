//! Model architectures: configuration, parameter management, and the two
//! forward paths (a lean evaluation pass and a differentiable graph build).
//!
//! The feature extractor is a stack of 3x3 convolutions and 2x2 max-pools
//! that maps a 3x32x32 patch to a flat feature vector (512-d at full depth,
//! 256-d for the shallow variant). Full-reference configurations run the
//! extractor twice with shared weights, fuse the two feature vectors, and
//! regress patch quality; weighted-pooling configurations add a second,
//! independently parameterized regression branch for the patch weight.

mod builder;
mod forward;

pub use builder::GraphModel;
pub use forward::{Forward, PatchOutput};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PATCH_SIZE: usize = 32;
pub const DROPOUT_KEEP: f64 = 0.5;
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Full-reference: the model sees the distorted and the pristine patch.
    Fr,
    /// No-reference: the model sees only the distorted patch.
    Nr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolingMode {
    Average,
    Weighted,
}

/// How reference and distorted feature vectors are combined (FR only).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    Diff,
    Concat,
    ConcatDiff,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Depth {
    Full,
    Shallow,
}

macro_rules! str_enum {
    ($ty:ty { $($variant:path => $name:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = match self { $($variant => $name),+ };
                f.write_str(s)
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " value: {}"), other
                    ))),
                }
            }
        }
    };
}

str_enum!(Task { Task::Fr => "fr", Task::Nr => "nr" });
str_enum!(PoolingMode { PoolingMode::Average => "average", PoolingMode::Weighted => "weighted" });
str_enum!(Fusion {
    Fusion::Diff => "diff",
    Fusion::Concat => "concat",
    Fusion::ConcatDiff => "concat_diff",
});
str_enum!(Depth { Depth::Full => "full", Depth::Shallow => "shallow" });

/// One layer of the architecture description.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerSpec {
    /// 3x3 kernel, zero padding 1, stride 1.
    Conv3 { in_channels: usize, out_channels: usize },
    /// 2x2 kernel, stride 2.
    MaxPool2,
    Relu,
    Fc { in_dim: usize, out_dim: usize },
    Dropout { keep: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub task: Task,
    pub pooling: PoolingMode,
    fusion: Option<Fusion>,
    pub depth: Depth,
    /// Stability term added to the rectified patch weight.
    pub epsilon: f64,
}

impl ModelConfig {
    pub fn new(
        task: Task,
        pooling: PoolingMode,
        fusion: Option<Fusion>,
        depth: Depth,
    ) -> Result<Self> {
        match (task, fusion) {
            (Task::Fr, None) => {
                return Err(Error::Config("FR configuration requires a fusion scheme".into()))
            }
            (Task::Nr, Some(_)) => {
                return Err(Error::Config("NR configuration carries no fusion scheme".into()))
            }
            _ => {}
        }
        Ok(ModelConfig { task, pooling, fusion, depth, epsilon: DEFAULT_EPSILON })
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    /// Fusion scheme of an FR configuration.
    pub fn fusion(&self) -> Option<Fusion> {
        self.fusion
    }

    pub fn patch_size(&self) -> usize {
        PATCH_SIZE
    }

    /// Length of the extracted feature vector.
    pub fn feature_dim(&self) -> usize {
        match self.depth {
            Depth::Full => 512,
            Depth::Shallow => 256,
        }
    }

    /// Length of the regression input after fusion.
    pub fn fused_dim(&self) -> usize {
        let d = self.feature_dim();
        match (self.task, self.fusion) {
            (Task::Nr, _) => d,
            (Task::Fr, Some(Fusion::Diff)) => d,
            (Task::Fr, Some(Fusion::Concat)) => 2 * d,
            (Task::Fr, Some(Fusion::ConcatDiff)) => 3 * d,
            (Task::Fr, None) => unreachable!("validated in new"),
        }
    }

    /// Hidden width of the regression branches (FC-512 / FC-256).
    pub fn head_hidden_dim(&self) -> usize {
        self.feature_dim()
    }
}

/// Feature-extractor architecture. Every convolution is followed by a ReLU;
/// the shallow variant ends in a second pool that collapses the remaining
/// 2x2 map so the flat feature vector is 256-d.
pub fn extractor_plan(depth: Depth) -> Vec<LayerSpec> {
    use LayerSpec::{Conv3, MaxPool2, Relu};
    let conv = |i, o| [Conv3 { in_channels: i, out_channels: o }, Relu];
    let mut plan = Vec::new();
    match depth {
        Depth::Full => {
            for (i, o, pool) in [
                (3, 32, false),
                (32, 32, true),
                (32, 64, false),
                (64, 64, true),
                (64, 128, false),
                (128, 128, true),
                (128, 256, false),
                (256, 256, true),
                (256, 512, false),
                (512, 512, true),
            ] {
                plan.extend(conv(i, o));
                if pool {
                    plan.push(MaxPool2);
                }
            }
        }
        Depth::Shallow => {
            plan.extend(conv(3, 32));
            plan.extend(conv(32, 32));
            plan.push(MaxPool2);
            plan.extend(conv(32, 64));
            plan.push(MaxPool2);
            plan.extend(conv(64, 128));
            plan.push(MaxPool2);
            plan.extend(conv(128, 256));
            plan.push(MaxPool2);
            plan.push(MaxPool2);
        }
    }
    plan
}

/// Regression branch: FC-hidden, ReLU, dropout, FC-1.
pub fn head_plan(config: &ModelConfig) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Fc { in_dim: config.fused_dim(), out_dim: config.head_hidden_dim() },
        LayerSpec::Relu,
        LayerSpec::Dropout { keep: DROPOUT_KEEP },
        LayerSpec::Fc { in_dim: config.head_hidden_dim(), out_dim: 1 },
    ]
}

/// Named parameter shapes in their canonical order: extractor convs, then
/// the quality branch, then (for weighted pooling) the weight branch.
pub fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut shapes = Vec::new();
    let mut conv_no = 0;
    for layer in extractor_plan(config.depth) {
        if let LayerSpec::Conv3 { in_channels, out_channels } = layer {
            conv_no += 1;
            shapes.push((
                format!("feat.conv{conv_no}.weight"),
                vec![out_channels, in_channels, 3, 3],
            ));
            shapes.push((format!("feat.conv{conv_no}.bias"), vec![out_channels]));
        }
    }
    let mut head = |prefix: &str, shapes: &mut Vec<(String, Vec<usize>)>| {
        let mut fc_no = 0;
        for layer in head_plan(config) {
            if let LayerSpec::Fc { in_dim, out_dim } = layer {
                fc_no += 1;
                shapes.push((format!("{prefix}.fc{fc_no}.weight"), vec![out_dim, in_dim]));
                shapes.push((format!("{prefix}.fc{fc_no}.bias"), vec![out_dim]));
            }
        }
    };
    head("q", &mut shapes);
    if config.pooling == PoolingMode::Weighted {
        head("w", &mut shapes);
    }
    shapes
}

/// Exact number of trainable scalars implied by a configuration.
pub fn count_params(config: &ModelConfig) -> usize {
    param_shapes(config)
        .iter()
        .map(|(_, shape)| shape.iter().product::<usize>())
        .sum()
}

/// Ordered, uniquely named parameter tensors. Iteration order is insertion
/// order and is part of the reproducibility contract.
#[derive(Clone, Debug)]
pub struct ParamSet<T = f32> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name: {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor.with_grad()));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).copied().map(move |i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub(crate) fn tensor_mut_by_index(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.entries[index].1
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.zero_grad();
        }
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (name, tensor) in &self.entries {
            out.insert(name.clone(), tensor.cast()).expect("names already unique");
        }
        out
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Fan-in-scaled normal initialization (std = sqrt(2 / fan_in)) for conv and
/// FC weights; zero biases. Deterministic for a given generator state.
pub fn init_params<T: Scalar>(config: &ModelConfig, rng: &mut ChaCha8Rng) -> ParamSet<T> {
    let mut set = ParamSet::new();
    for (name, shape) in param_shapes(config) {
        let n: usize = shape.iter().product();
        let tensor = if name.ends_with(".bias") {
            Tensor::zeros(shape)
        } else {
            let fan_in: usize = match shape.len() {
                4 => shape[1] * shape[2] * shape[3],
                2 => shape[1],
                _ => unreachable!("weights are conv or fc"),
            };
            let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let data = (0..n).map(|_| T::from_f64(normal.sample(rng))).collect();
            Tensor::new(shape, data).expect("shape/data agree")
        };
        set.insert(name, tensor).expect("shapes list has unique names");
    }
    set
}

/// Applies the feature-fusion scheme to a pair of flat feature vectors.
pub fn fuse_features<T: Scalar>(
    f_r: &Tensor<T>,
    f_d: &Tensor<T>,
    scheme: Fusion,
) -> Result<Tensor<T>> {
    if f_r.shape() != f_d.shape() || f_r.shape().len() != 1 {
        return Err(Error::Dimension(format!(
            "fusion needs two equal-length vectors, got {:?} and {:?}",
            f_r.shape(),
            f_d.shape()
        )));
    }
    let d = f_r.len();
    let diff = || f_r.iter().zip(f_d.iter()).map(|(&r, &dv)| r - dv);
    let data: Vec<T> = match scheme {
        Fusion::Diff => diff().collect(),
        Fusion::Concat => f_r.iter().chain(f_d.iter()).copied().collect(),
        Fusion::ConcatDiff => {
            let mut v: Vec<T> = f_r.iter().chain(f_d.iter()).copied().collect();
            v.extend(diff());
            v
        }
    };
    let out_dim = match scheme {
        Fusion::Diff => d,
        Fusion::Concat => 2 * d,
        Fusion::ConcatDiff => 3 * d,
    };
    Tensor::new(vec![out_dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn fr_config(pooling: PoolingMode, fusion: Fusion, depth: Depth) -> ModelConfig {
        ModelConfig::new(Task::Fr, pooling, Some(fusion), depth).unwrap()
    }

    #[test]
    fn nr_config_rejects_fusion() {
        assert!(ModelConfig::new(Task::Nr, PoolingMode::Average, Some(Fusion::Diff), Depth::Full)
            .is_err());
        assert!(ModelConfig::new(Task::Fr, PoolingMode::Average, None, Depth::Full).is_err());
    }

    #[test]
    fn extractor_plan_reaches_unit_spatial_size() {
        for depth in [Depth::Full, Depth::Shallow] {
            let mut spatial = PATCH_SIZE;
            let mut channels = 3;
            for layer in extractor_plan(depth) {
                match layer {
                    LayerSpec::Conv3 { in_channels, out_channels } => {
                        assert_eq!(in_channels, channels);
                        channels = out_channels;
                    }
                    LayerSpec::MaxPool2 => spatial /= 2,
                    LayerSpec::Relu => {}
                    _ => panic!("unexpected layer in extractor"),
                }
            }
            assert_eq!(spatial, 1);
            let want = match depth {
                Depth::Full => 512,
                Depth::Shallow => 256,
            };
            assert_eq!(channels, want);
        }
    }

    #[test]
    fn first_conv_weight_shape_matches_layer_listing() {
        let cfg = ModelConfig::new(Task::Nr, PoolingMode::Average, None, Depth::Full).unwrap();
        let shapes = param_shapes(&cfg);
        let (name, shape) = &shapes[0];
        assert_eq!(name, "feat.conv1.weight");
        assert_eq!(shape, &vec![32, 3, 3, 3]);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = ModelConfig::new(Task::Nr, PoolingMode::Average, None, Depth::Shallow).unwrap();
        let a: ParamSet<f32> = init_params(&cfg, &mut stream_rng(7, Stream::Init));
        let b: ParamSet<f32> = init_params(&cfg, &mut stream_rng(7, Stream::Init));
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn init_variance_tracks_fan_in() {
        // A 512x512 FC weight should have sample variance near 2/512.
        let mut rng = stream_rng(3, Stream::Init);
        let cfg = fr_config(PoolingMode::Average, Fusion::Diff, Depth::Full);
        let set: ParamSet<f64> = init_params(&cfg, &mut rng);
        let w = set.get("q.fc1.weight").unwrap();
        assert_eq!(w.shape(), &[512, 512]);
        let n = w.len() as f64;
        let mean: f64 = w.iter().sum::<f64>() / n;
        let var: f64 = w.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let want = 2.0 / 512.0;
        assert!((var - want).abs() < 0.2 * want, "var {var} vs {want}");
    }

    #[test]
    fn init_biases_are_zero() {
        let cfg = ModelConfig::new(Task::Nr, PoolingMode::Weighted, None, Depth::Shallow).unwrap();
        let set: ParamSet<f32> = init_params(&cfg, &mut stream_rng(1, Stream::Init));
        for (name, t) in set.iter() {
            if name.ends_with(".bias") {
                assert!(t.iter().all(|&v| v == 0.0), "{name} not zero");
            }
        }
    }

    #[test]
    fn count_matches_closed_form_full_extractor() {
        // Sum of 9*C_in*C_out + C_out over the ten full-depth convolutions.
        let channels =
            [(3, 32), (32, 32), (32, 64), (64, 64), (64, 128), (128, 128), (128, 256),
             (256, 256), (256, 512), (512, 512)];
        let conv_total: usize =
            channels.iter().map(|&(i, o)| 9 * i * o + o).sum();
        assert_eq!(conv_total, 4_712_224);

        let cfg = ModelConfig::new(Task::Nr, PoolingMode::Average, None, Depth::Full).unwrap();
        let head = 512 * 512 + 512 + 512 + 1; // FC-512 + FC-1 on a 512-d input
        assert_eq!(count_params(&cfg), conv_total + head);
    }

    #[test]
    fn weighted_fr_diff_lands_near_five_million() {
        let cfg = fr_config(PoolingMode::Weighted, Fusion::Diff, Depth::Full);
        let n = count_params(&cfg);
        assert!((4_700_000..=5_700_000).contains(&n), "{n}");
        assert_eq!(n, 5_238_562);
    }

    #[test]
    fn shallow_weighted_fr_lands_near_790k() {
        let cfg = fr_config(PoolingMode::Weighted, Fusion::ConcatDiff, Depth::Shallow);
        let n = count_params(&cfg);
        assert!((700_000..=900_000).contains(&n), "{n}");
        assert_eq!(n, 791_906);
    }

    #[test]
    fn count_agrees_with_materialized_params() {
        for cfg in [
            fr_config(PoolingMode::Weighted, Fusion::ConcatDiff, Depth::Full),
            ModelConfig::new(Task::Nr, PoolingMode::Weighted, None, Depth::Shallow).unwrap(),
        ] {
            let set: ParamSet<f32> = init_params(&cfg, &mut stream_rng(0, Stream::Init));
            assert_eq!(set.scalar_count(), count_params(&cfg));
        }
    }

    #[test]
    fn fusion_dimensions_and_values() {
        let f_r = Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap();
        let f_d = Tensor::new(vec![2], vec![0.0f32, 5.0]).unwrap();
        assert_eq!(fuse_features(&f_r, &f_d, Fusion::Diff).unwrap().data(), &[1.0, -3.0]);
        assert_eq!(
            fuse_features(&f_r, &f_d, Fusion::Concat).unwrap().data(),
            &[1.0, 2.0, 0.0, 5.0]
        );
        assert_eq!(
            fuse_features(&f_r, &f_d, Fusion::ConcatDiff).unwrap().data(),
            &[1.0, 2.0, 0.0, 5.0, 1.0, -3.0]
        );
    }

    #[test]
    fn diff_fusion_of_identical_vectors_is_zero() {
        let f = Tensor::new(vec![4], vec![0.5f32, -1.0, 2.0, 0.0]).unwrap();
        let out = fuse_features(&f, &f, Fusion::Diff).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_diff_of_512d_vectors_is_1536d() {
        let f_r = Tensor::<f32>::zeros(vec![512]);
        let f_d = Tensor::<f32>::zeros(vec![512]);
        assert_eq!(fuse_features(&f_r, &f_d, Fusion::ConcatDiff).unwrap().len(), 1536);
    }
}
