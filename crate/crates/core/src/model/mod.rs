//! Fully convolutional flow-map regressor and its dense-fusion variants.

mod checkpoint;
mod fcn;
pub(crate) mod ops;

use ndarray::{Array2, Array3, ArrayView1, ArrayView2, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{masked_loss_with_grad, LossScale, LossSpec};
use crate::sampler::Target;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use ops::Scalar;

use fcn::{Init, Layout, Net, ParamSpec};

/// Minimum input side; smaller inputs vanish in the stride-32 trunk.
pub const MIN_INPUT_SIDE: usize = 32;
/// Window side fixed by the dense-fusion reshapes.
pub const FC_WINDOW: usize = 100;
pub const DEFAULT_FC_HIDDEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Fcn8,
    FcEarly,
    FcMid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub arch: Arch,
    #[serde(default)]
    pub temporal_vector_len: usize,
    pub base_width: usize,
    #[serde(default = "default_fc_hidden")]
    pub fc_hidden: usize,
    pub init_seed: u64,
}

fn default_fc_hidden() -> usize {
    DEFAULT_FC_HIDDEN
}

impl ModelConfig {
    pub fn fcn8(in_channels: usize, base_width: usize, init_seed: u64) -> Self {
        Self {
            in_channels,
            arch: Arch::Fcn8,
            temporal_vector_len: 0,
            base_width,
            fc_hidden: DEFAULT_FC_HIDDEN,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be at least 1".into()));
        }
        if self.base_width == 0 {
            return Err(Error::Config("base_width must be at least 1".into()));
        }
        if self.arch != Arch::Fcn8 {
            if self.temporal_vector_len == 0 {
                return Err(Error::Config(format!(
                    "{:?} needs a positive temporal_vector_len",
                    self.arch
                )));
            }
            if self.fc_hidden == 0 {
                return Err(Error::Config("fc_hidden must be at least 1".into()));
            }
        }
        Ok(())
    }
}

/// Predicted flow on the normalized scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMap {
    pub values: Array2<f32>,
    pub flow_norm_max: f64,
}

impl FlowMap {
    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Flow in m³/s.
    pub fn denormalized(&self) -> Array2<f32> {
        let m = self.flow_norm_max as f32;
        self.values.mapv(|v| v * m)
    }

    pub fn at(&self, pixel: (usize, usize)) -> f64 {
        self.values[pixel] as f64 * self.flow_norm_max
    }
}

/// Per-parameter gradient buffers, aligned with [`Model::param_names`].
pub type Gradients<T> = Vec<Vec<T>>;

#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    layout: Layout,
    specs: Vec<ParamSpec>,
    params: Vec<Vec<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = fcn::build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let params = specs
            .iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                match spec.init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::He { fan_in } => {
                        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                        (0..n)
                            .map(|_| T::from_f64_lossy(normal.sample(&mut rng)))
                            .collect()
                    }
                    Init::Bilinear { stride } => ops::bilinear_kernel(stride)
                        .into_iter()
                        .map(T::from_f64_lossy)
                        .collect(),
                }
            })
            .collect();
        Ok(Self {
            config,
            layout,
            specs,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.specs.iter().map(|s| s.name.as_str())
    }

    pub fn param_shape(&self, index: usize) -> &[usize] {
        &self.specs[index].shape
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn params(&self) -> &[Vec<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&[T]> {
        self.param_index(name).map(|i| self.params[i].as_slice())
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let i = self.param_index(name)?;
        Some(self.params[i].as_mut_slice())
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        self.params
            .iter()
            .map(|p| vec![T::zero(); p.len()])
            .collect()
    }

    /// Same architecture and parameters in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            specs: self.specs.clone(),
            params: self
                .params
                .iter()
                .map(|p| {
                    p.iter()
                        .map(|v| U::from_f64_lossy(v.to_f64().unwrap()))
                        .collect()
                })
                .collect(),
        }
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        named: Vec<(String, Vec<usize>, Vec<T>)>,
    ) -> Result<Self> {
        let mut model = Self::init(config)?;
        if named.len() != model.specs.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.specs.len(),
                named.len()
            )));
        }
        for ((name, shape, data), (spec, slot)) in named
            .into_iter()
            .zip(model.specs.iter().zip(model.params.iter_mut()))
        {
            if name != spec.name || shape != spec.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {shape:?} does not match {} {:?}",
                    spec.name, spec.shape
                )));
            }
            *slot = data;
        }
        Ok(model)
    }

    fn net(&self) -> Net<'_, T> {
        Net {
            layout: &self.layout,
            params: &self.params,
            arch: self.config.arch,
        }
    }

    fn check_input(
        &self,
        spatial: &ArrayView3<'_, T>,
        temporal: Option<&ArrayView1<'_, T>>,
    ) -> Result<()> {
        let (c, h, w) = spatial.dim();
        if c != self.config.in_channels {
            return Err(Error::DimensionMismatch(format!(
                "input has {c} channels, model expects {}",
                self.config.in_channels
            )));
        }
        if h < MIN_INPUT_SIDE || w < MIN_INPUT_SIDE {
            return Err(Error::DimensionMismatch(format!(
                "input {h}x{w} is smaller than {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE}"
            )));
        }
        if spatial.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(
                "model input contains non-finite values".into(),
            ));
        }
        match (self.config.arch, temporal) {
            (Arch::Fcn8, None) => {}
            (Arch::Fcn8, Some(_)) => {
                return Err(Error::InvalidArgument(
                    "fcn8 takes no temporal vector".into(),
                ))
            }
            (_, None) => {
                return Err(Error::InvalidArgument(format!(
                    "{:?} needs a temporal vector",
                    self.config.arch
                )))
            }
            (_, Some(tv)) => {
                if (h, w) != (FC_WINDOW, FC_WINDOW) {
                    return Err(Error::DimensionMismatch(format!(
                        "{:?} needs a {FC_WINDOW}x{FC_WINDOW} window, got {h}x{w}",
                        self.config.arch
                    )));
                }
                if tv.len() != self.config.temporal_vector_len {
                    return Err(Error::DimensionMismatch(format!(
                        "temporal vector has length {}, model expects {}",
                        tv.len(),
                        self.config.temporal_vector_len
                    )));
                }
                if tv.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(
                        "temporal vector contains non-finite values".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Flow map for a plain FCN8 input of shape (K, H, W).
    pub fn forward(&self, input: &ArrayView3<'_, T>) -> Result<Array2<T>> {
        self.predict(input, None)
    }

    pub fn forward_fc_early(
        &self,
        spatial: &ArrayView3<'_, T>,
        temporal: &ArrayView1<'_, T>,
    ) -> Result<Array2<T>> {
        if self.config.arch != Arch::FcEarly {
            return Err(Error::InvalidArgument("model is not fc_early".into()));
        }
        self.predict(spatial, Some(temporal))
    }

    pub fn forward_fc_mid(
        &self,
        spatial: &ArrayView3<'_, T>,
        temporal: &ArrayView1<'_, T>,
    ) -> Result<Array2<T>> {
        if self.config.arch != Arch::FcMid {
            return Err(Error::InvalidArgument("model is not fc_mid".into()));
        }
        self.predict(spatial, Some(temporal))
    }

    /// Dispatches on the architecture.
    pub fn predict(
        &self,
        spatial: &ArrayView3<'_, T>,
        temporal: Option<&ArrayView1<'_, T>>,
    ) -> Result<Array2<T>> {
        self.check_input(spatial, temporal)?;
        let (out, _) = self.net().forward(spatial, temporal, false)?;
        Ok(out)
    }

    /// Vector-Jacobian product: accumulates d<output, dout>/dθ into `grads`
    /// and returns the output together with the input gradient when asked.
    pub fn backward(
        &self,
        spatial: &ArrayView3<'_, T>,
        temporal: Option<&ArrayView1<'_, T>>,
        dout: &ArrayView2<'_, T>,
        grads: &mut Gradients<T>,
        want_input_grad: bool,
    ) -> Result<(Array2<T>, Option<Array3<T>>)> {
        self.check_input(spatial, temporal)?;
        let net = self.net();
        let (out, trace) = net.forward(spatial, temporal, true)?;
        if dout.dim() != out.dim() {
            return Err(Error::DimensionMismatch(format!(
                "output gradient {:?} vs output {:?}",
                dout.dim(),
                out.dim()
            )));
        }
        let dx = net.backward(trace.unwrap(), &dout.to_owned(), grads, want_input_grad);
        Ok((out, dx))
    }

    /// Masked loss of one sample; its parameter gradient is added to `grads`.
    pub fn loss_and_grad(
        &self,
        spatial: &ArrayView3<'_, T>,
        temporal: Option<&ArrayView1<'_, T>>,
        targets: &[Target],
        loss: &LossSpec,
        scale: LossScale,
        grads: &mut Gradients<T>,
    ) -> Result<f64> {
        self.check_input(spatial, temporal)?;
        let net = self.net();
        let (out, trace) = net.forward(spatial, temporal, true)?;
        let (value, pixel_grads) = masked_loss_with_grad(out.view(), targets, loss, scale)?;
        let mut dout = Array2::<T>::zeros(out.dim());
        for (pixel, g) in pixel_grads {
            dout[pixel] = dout[pixel] + T::from_f64_lossy(g);
        }
        net.backward(trace.unwrap(), &dout, grads, false);
        Ok(value)
    }

    pub fn loss(
        &self,
        spatial: &ArrayView3<'_, T>,
        temporal: Option<&ArrayView1<'_, T>>,
        targets: &[Target],
        loss: &LossSpec,
        scale: LossScale,
    ) -> Result<f64> {
        let out = self.predict(spatial, temporal)?;
        crate::losses::masked_loss(out.view(), targets, loss, scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Axis};
    use rand::Rng;

    fn random_input(c: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, h, w), |_| rng.random::<f64>())
    }

    fn fc_config(arch: Arch, c: usize) -> ModelConfig {
        ModelConfig {
            in_channels: c,
            arch,
            temporal_vector_len: 6,
            base_width: 1,
            fc_hidden: 8,
            init_seed: 3,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::fcn8(5, 2, 11);
        let a = Model::<f32>::init(cfg.clone()).unwrap();
        let b = Model::<f32>::init(cfg.clone()).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.count_parameters(), b.count_parameters());
        let c = Model::<f32>::init(ModelConfig {
            init_seed: 12,
            ..cfg
        })
        .unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn first_kernel_takes_all_channels() {
        let m = Model::<f32>::init(ModelConfig::fcn8(50, 2, 0)).unwrap();
        let i = m.param_index("conv1_1.weight").unwrap();
        assert_eq!(m.param_shape(i), &[2, 50, 3, 3]);
    }

    #[test]
    fn parameter_count_difference_is_first_layer_only() {
        let w = 4;
        let a = Model::<f32>::init(ModelConfig::fcn8(50, w, 0)).unwrap();
        let b = Model::<f32>::init(ModelConfig::fcn8(30, w, 0)).unwrap();
        assert_eq!(a.count_parameters() - b.count_parameters(), 20 * 3 * 3 * w);
    }

    #[test]
    fn invalid_configs() {
        assert!(Model::<f32>::init(ModelConfig::fcn8(0, 2, 0)).is_err());
        let mut cfg = fc_config(Arch::FcEarly, 3);
        cfg.temporal_vector_len = 0;
        assert!(Model::<f32>::init(cfg).is_err());
    }

    #[test]
    fn output_matches_input_size() {
        let m = Model::<f64>::init(ModelConfig::fcn8(3, 1, 0)).unwrap();
        for (h, w) in [(32, 32), (33, 47), (64, 100), (100, 100)] {
            let x = random_input(3, h, w, 1);
            assert_eq!(m.forward(&x.view()).unwrap().dim(), (h, w));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = Model::<f64>::init(ModelConfig::fcn8(3, 1, 0)).unwrap();
        assert!(m.forward(&random_input(4, 32, 32, 0).view()).is_err());
        assert!(m.forward(&random_input(3, 31, 40, 0).view()).is_err());
        let mut x = random_input(3, 32, 32, 0);
        x[(1, 2, 3)] = f64::NAN;
        assert!(matches!(m.forward(&x.view()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn zero_score_weights_give_constant_map() {
        let mut m = Model::<f64>::init(ModelConfig::fcn8(3, 1, 0)).unwrap();
        for (name, bias) in [
            ("score_fr", 0.25),
            ("score_pool4", -0.5),
            ("score_pool3", 1.5),
        ] {
            m.param_mut(&format!("{name}.weight")).unwrap().fill(0.0);
            m.param_mut(&format!("{name}.bias")).unwrap().fill(bias);
        }
        let out = m.forward(&random_input(3, 70, 45, 2).view()).unwrap();
        for v in out.iter() {
            assert!((v - 1.25).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn fc_early_geometry() {
        let m = Model::<f64>::init(fc_config(Arch::FcEarly, 10)).unwrap();
        let i = m.param_index("conv1_1.weight").unwrap();
        assert_eq!(m.param_shape(i)[1], 12);
        let i = m.param_index("temporal_fc2.weight").unwrap();
        assert_eq!(m.param_shape(i), &[20_000, 8]);
        let tv = Array1::from_elem(6, 0.5);
        let out = m
            .forward_fc_early(&random_input(10, 100, 100, 0).view(), &tv.view())
            .unwrap();
        assert_eq!(out.dim(), (100, 100));
        assert!(m
            .forward_fc_early(&random_input(10, 128, 128, 0).view(), &tv.view())
            .is_err());
    }

    #[test]
    fn fc_mid_geometry() {
        let m = Model::<f64>::init(fc_config(Arch::FcMid, 10)).unwrap();
        let i = m.param_index("temporal_fc2.weight").unwrap();
        assert_eq!(m.param_shape(i)[0], 2888);
        let i = m.param_index("conv3_1.weight").unwrap();
        assert_eq!(m.param_shape(i)[1], 2 + 2);
        let tv = Array1::from_elem(6, 0.5);
        let out = m
            .forward_fc_mid(&random_input(10, 100, 100, 0).view(), &tv.view())
            .unwrap();
        assert_eq!(out.dim(), (100, 100));
        assert!(m
            .forward_fc_mid(&random_input(10, 200, 200, 0).view(), &tv.view())
            .is_err());
    }

    #[test]
    fn zero_temporal_branch_injects_zeros() {
        for arch in [Arch::FcEarly, Arch::FcMid] {
            let mut m = Model::<f64>::init(fc_config(arch, 2)).unwrap();
            // With the injected channels all zero their input weights are
            // irrelevant, so zeroing those weights must not move the output.
            let x = random_input(2, 100, 100, 5);
            let tv = Array1::zeros(6);
            let before = m.predict(&x.view(), Some(&tv.view())).unwrap();
            let name = if arch == Arch::FcEarly {
                "conv1_1.weight"
            } else {
                "conv3_1.weight"
            };
            let i = m.param_index(name).unwrap();
            let shape = m.param_shape(i).to_vec();
            let mut w = Array::from_shape_vec(shape.clone(), m.params()[i].clone()).unwrap();
            let injected_from = shape[1] - 2;
            w.slice_axis_mut(Axis(1), (injected_from..).into())
                .fill(7.0);
            m.params_mut()[i] = w.into_raw_vec_and_offset().0;
            let after = m.predict(&x.view(), Some(&tv.view())).unwrap();
            assert_eq!(before, after);
        }
    }
    use ndarray::Array;

    fn check_gradients(cfg: ModelConfig, h: usize, w: usize, temporal: bool) {
        let mut model = Model::<f64>::init(cfg.clone()).unwrap();
        // Zero biases put every padded activation exactly on a ReLU kink.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (i, p) in model.params.iter_mut().enumerate() {
            if model.specs[i].name.ends_with(".bias") {
                p.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
            }
        }
        let x = random_input(cfg.in_channels, h, w, 9);
        let tv =
            temporal.then(|| Array1::from_shape_fn(cfg.temporal_vector_len, |i| 0.1 * i as f64));
        let targets = [
            Target {
                pixel: (3, 4),
                flow: 2.0,
                norm_max: 4.0,
            },
            Target {
                pixel: (h - 2, w / 2),
                flow: 0.5,
                norm_max: 4.0,
            },
        ];
        let spec = LossSpec::huber(1.0);
        let mut grads = model.zero_gradients();
        model
            .loss_and_grad(
                &x.view(),
                tv.as_ref().map(|t| t.view()).as_ref(),
                &targets,
                &spec,
                LossScale::Normalized,
                &mut grads,
            )
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tvv = tv.as_ref().map(|t| t.view());
        let loss_at = |m: &Model<f64>| {
            m.loss(
                &x.view(),
                tvv.as_ref(),
                &targets,
                &spec,
                LossScale::Normalized,
            )
            .unwrap()
        };
        let l0 = loss_at(&model);
        let eps = 1e-6;
        let (mut checked, mut straddled) = (0, 0);
        while checked < 20 {
            let p = rng.random_range(0..model.params().len());
            let j = rng.random_range(0..model.params()[p].len());
            let mut plus = model.clone();
            plus.params_mut()[p][j] += eps;
            let mut minus = model.clone();
            minus.params_mut()[p][j] -= eps;
            let (lp, lm) = (loss_at(&plus), loss_at(&minus));
            let fd = (lp - lm) / (2.0 * eps);
            let an = grads[p][j];
            if fd.abs() < 1e-7 && an.abs() < 1e-7 {
                continue;
            }
            // One-sided slopes that disagree mean the step crossed a ReLU or
            // pooling switch, where no finite difference is meaningful.
            let (fwd, bwd) = ((lp - l0) / eps, (l0 - lm) / eps);
            if (fwd - bwd).abs() > 1e-3 * fd.abs().max(1e-3) {
                straddled += 1;
                assert!(straddled <= 5, "too many kinks straddled");
                continue;
            }
            let rel = (fd - an).abs() / fd.abs().max(an.abs());
            assert!(
                rel < 1e-4,
                "{}[{j}] analytic {an} fd {fd}",
                model.specs[p].name
            );
            checked += 1;
        }
    }

    #[test]
    fn fcn8_gradients_match_finite_differences() {
        check_gradients(ModelConfig::fcn8(3, 1, 4), 40, 36, false);
    }

    #[test]
    fn fc_mid_gradients_match_finite_differences() {
        check_gradients(fc_config(Arch::FcMid, 2), 100, 100, true);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let model = Model::<f64>::init(ModelConfig::fcn8(2, 1, 8)).unwrap();
        let x = random_input(2, 33, 35, 4);
        let dout = Array2::from_shape_fn((33, 35), |(r, c)| ((r * 7 + c * 3) % 5) as f64 - 2.0);
        let mut grads = model.zero_gradients();
        let (_, dx) = model
            .backward(&x.view(), None, &dout.view(), &mut grads, true)
            .unwrap();
        let dx = dx.unwrap();
        let eps = 1e-4;
        for idx in [(0, 0, 0), (1, 16, 17), (0, 32, 34), (1, 5, 30)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fp = (&model.forward(&xp.view()).unwrap() * &dout).sum();
            let fm = (&model.forward(&xm.view()).unwrap() * &dout).sum();
            let fd = (fp - fm) / (2.0 * eps);
            assert!(
                (fd - dx[idx]).abs() <= 1e-5 * fd.abs().max(1.0),
                "{idx:?}: {fd} vs {}",
                dx[idx]
            );
        }
    }

    #[test]
    fn cast_round_trip() {
        let m = Model::<f32>::init(ModelConfig::fcn8(2, 1, 0)).unwrap();
        let back: Model<f32> = m.cast::<f64>().cast();
        assert_eq!(m.params(), back.params());
    }
}
