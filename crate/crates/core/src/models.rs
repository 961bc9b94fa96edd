//! Predictor `f_θ(X, D)` and critic `c_ω(Z, D)`.
//!
//! The predictor is a frozen encoder (identity or a fixed random projection)
//! followed by a trainable adapter MLP and a linear head. The critic embeds
//! site and stratum ids, concatenates the embeddings and runs them through a
//! spectrally normalized LeakyReLU MLP with no activation after the last
//! layer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::scm::TaskMode;
use crate::seed::{self, stream};
use crate::tensor::{
    affine_backward, affine_forward, leaky_relu, leaky_relu_backward, sigmoid, softmax_rows,
    spectral_backward, spectral_normalize, DenseArray, ParameterStore, SpectralNorm,
    DEFAULT_LEAKY_SLOPE,
};

const EMBED_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderSpec {
    Identity,
    /// Fixed seeded Gaussian projection to `dim` features; never trained.
    RandomProjection {
        dim: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorSpec {
    pub feature_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub n_classes: usize,
    pub use_demographics: bool,
    pub n_strata: usize,
    pub d_embed_dim: usize,
    pub task_mode: TaskMode,
    pub leaky_slope: f64,
    pub encoder: EncoderSpec,
}

impl Default for PredictorSpec {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            hidden_dims: vec![32],
            n_classes: 2,
            use_demographics: true,
            n_strata: 2,
            d_embed_dim: 8,
            task_mode: TaskMode::SingleLabel,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            encoder: EncoderSpec::Identity,
        }
    }
}

impl PredictorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::invalid(
                "adapter needs at least one nonzero hidden layer",
            ));
        }
        let min_classes = match self.task_mode {
            TaskMode::SingleLabel => 2,
            TaskMode::MultiLabel => 1,
        };
        if self.n_classes < min_classes {
            return Err(Error::invalid(format!(
                "{} needs at least {min_classes} classes",
                self.task_mode.as_str()
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::invalid("feature_dim must be positive"));
        }
        if self.use_demographics && (self.n_strata == 0 || self.d_embed_dim == 0) {
            return Err(Error::invalid(
                "demographic input needs n_strata and d_embed_dim > 0",
            ));
        }
        if let EncoderSpec::RandomProjection { dim: 0 } = self.encoder {
            return Err(Error::invalid("projection dim must be positive"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::invalid("leaky slope must lie in (0, 1)"));
        }
        Ok(())
    }

    fn encoded_dim(&self) -> usize {
        match self.encoder {
            EncoderSpec::Identity => self.feature_dim,
            EncoderSpec::RandomProjection { dim } => dim,
        }
    }

    fn adapter_input_dim(&self) -> usize {
        self.encoded_dim()
            + if self.use_demographics {
                self.d_embed_dim
            } else {
                0
            }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticSpec {
    pub n_sites: usize,
    pub n_strata: usize,
    pub z_embed_dim: usize,
    pub d_embed_dim: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub output_dim: usize,
    pub leaky_slope: f64,
}

impl Default for CriticSpec {
    fn default() -> Self {
        Self {
            n_sites: 5,
            n_strata: 2,
            z_embed_dim: 8,
            d_embed_dim: 8,
            hidden_dim: 32,
            n_layers: 3,
            output_dim: 8,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }
}

impl CriticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_sites == 0 || self.n_strata == 0 {
            return Err(Error::invalid(
                "critic needs at least one site and one stratum",
            ));
        }
        if self.output_dim == 0 || self.n_layers == 0 || self.hidden_dim == 0 {
            return Err(Error::invalid(
                "critic output_dim, n_layers and hidden_dim must be >= 1",
            ));
        }
        if self.z_embed_dim + self.d_embed_dim == 0 {
            return Err(Error::invalid("critic input would be empty"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::invalid("leaky slope must lie in (0, 1)"));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.n_layers);
        let mut input = self.z_embed_dim + self.d_embed_dim;
        for l in 0..self.n_layers {
            let out = if l + 1 == self.n_layers {
                self.output_dim
            } else {
                self.hidden_dim
            };
            dims.push((input, out));
            input = out;
        }
        dims
    }

    pub fn layer_weight_names(&self) -> Vec<String> {
        (0..self.n_layers)
            .map(|l| format!("critic.layer{l}.weight"))
            .collect()
    }
}

fn fan_in_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseArray {
    let bound = (6.0 / cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    DenseArray::matrix(rows, cols, data).expect("finite init")
}

fn embedding(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseArray {
    let normal = Normal::new(0.0, EMBED_STD).expect("valid std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    DenseArray::matrix(rows, cols, data).expect("finite init")
}

fn unit_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn check_ids(ids: &[usize], bound: usize, what: &str) -> Result<()> {
    match ids.iter().find(|&&i| i >= bound) {
        Some(i) => Err(Error::invalid(format!(
            "{what} id {i} out of range 0..{bound}"
        ))),
        None => Ok(()),
    }
}

/// The trainable predictor plus its frozen encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub spec: PredictorSpec,
    /// `encoded_dim × feature_dim` projection, `None` for the identity encoder.
    pub encoder: Option<DenseArray>,
}

#[derive(Debug, Clone)]
pub struct PredictorTape {
    d: Vec<usize>,
    /// Input to each adapter layer and to the head (last entry).
    inputs: Vec<DenseArray>,
    /// Pre-activation of each adapter layer.
    pre: Vec<DenseArray>,
    pub logits: DenseArray,
    pub probs: DenseArray,
}

impl PredictorTape {
    /// Adapter output fed to the classifier head.
    pub fn representation(&self) -> &DenseArray {
        self.inputs.last().expect("head input present")
    }
}

impl Predictor {
    /// Builds the predictor and a freshly initialized parameter store.
    pub fn init(spec: PredictorSpec, seed: u64) -> Result<(Self, ParameterStore)> {
        spec.validate()?;
        let mut rng = seed::rng(seed);
        let mut store = ParameterStore::new();
        if spec.use_demographics {
            store.insert(
                "pred.d_embed",
                embedding(&mut rng, spec.n_strata, spec.d_embed_dim),
                None,
            )?;
        }
        let mut input = spec.adapter_input_dim();
        for (l, &h) in spec.hidden_dims.iter().enumerate() {
            store.insert(
                format!("pred.adapter{l}.weight"),
                fan_in_uniform(&mut rng, h, input),
                None,
            )?;
            store.insert(
                format!("pred.adapter{l}.bias"),
                DenseArray::zeros(&[h]),
                None,
            )?;
            input = h;
        }
        store.insert(
            "pred.head.weight",
            fan_in_uniform(&mut rng, spec.n_classes, input),
            None,
        )?;
        store.insert("pred.head.bias", DenseArray::zeros(&[spec.n_classes]), None)?;

        let encoder = match spec.encoder {
            EncoderSpec::Identity => None,
            EncoderSpec::RandomProjection { dim } => {
                let mut enc_rng = seed::rng(seed::mix(seed, &[stream::ENCODER]));
                let scale = 1.0 / (spec.feature_dim as f64).sqrt();
                let data = (0..dim * spec.feature_dim)
                    .map(|_| {
                        let v: f64 = StandardNormal.sample(&mut enc_rng);
                        scale * v
                    })
                    .collect();
                Some(DenseArray::matrix(dim, spec.feature_dim, data)?)
            }
        };
        Ok((Self { spec, encoder }, store))
    }

    fn encode(&self, x: &DenseArray) -> Result<DenseArray> {
        if x.cols() != self.spec.feature_dim {
            return Err(Error::dim(format!(
                "features have {} columns, predictor expects {}",
                x.cols(),
                self.spec.feature_dim
            )));
        }
        match &self.encoder {
            None => Ok(x.clone()),
            Some(p) => affine_forward(x, p, &DenseArray::zeros(&[p.rows()])),
        }
    }

    pub fn forward(
        &self,
        params: &ParameterStore,
        x: &DenseArray,
        d: &[usize],
    ) -> Result<PredictorTape> {
        if x.rows() != d.len() {
            return Err(Error::dim(format!(
                "{} feature rows vs {} strata",
                x.rows(),
                d.len()
            )));
        }
        if !x.all_finite() {
            return Err(Error::invalid("non-finite feature value"));
        }
        let mut h = self.encode(x)?;
        if self.spec.use_demographics {
            check_ids(d, self.spec.n_strata, "stratum")?;
            let emb = params.value("pred.d_embed")?.gather_rows(d)?;
            h = h.hcat(&emb)?;
        }
        let mut inputs = Vec::with_capacity(self.spec.hidden_dims.len() + 1);
        let mut pre = Vec::with_capacity(self.spec.hidden_dims.len());
        for l in 0..self.spec.hidden_dims.len() {
            let z = affine_forward(
                &h,
                params.value(&format!("pred.adapter{l}.weight"))?,
                params.value(&format!("pred.adapter{l}.bias"))?,
            )?;
            let next = leaky_relu(&z, self.spec.leaky_slope);
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        let logits = affine_forward(
            &h,
            params.value("pred.head.weight")?,
            params.value("pred.head.bias")?,
        )?;
        inputs.push(h);
        let probs = match self.spec.task_mode {
            TaskMode::SingleLabel => softmax_rows(&logits),
            TaskMode::MultiLabel => logits.map(sigmoid),
        };
        Ok(PredictorTape {
            d: d.to_vec(),
            inputs,
            pre,
            logits,
            probs,
        })
    }

    /// Backpropagate `∂L/∂logits`, accumulating into the store's gradients.
    pub fn backward(
        &self,
        params: &mut ParameterStore,
        tape: &PredictorTape,
        grad_logits: &DenseArray,
    ) -> Result<()> {
        let n_hidden = self.spec.hidden_dims.len();
        let (mut g, dw, db) = affine_backward(
            &tape.inputs[n_hidden],
            params.value("pred.head.weight")?,
            grad_logits,
        )?;
        params.accumulate_grad("pred.head.weight", &dw)?;
        params.accumulate_grad("pred.head.bias", &db)?;
        for l in (0..n_hidden).rev() {
            let g_pre = leaky_relu_backward(&tape.pre[l], &g, self.spec.leaky_slope)?;
            let wname = format!("pred.adapter{l}.weight");
            let (gx, dw, db) = affine_backward(&tape.inputs[l], params.value(&wname)?, &g_pre)?;
            params.accumulate_grad(&wname, &dw)?;
            params.accumulate_grad(&format!("pred.adapter{l}.bias"), &db)?;
            g = gx;
        }
        if self.spec.use_demographics {
            let (_, g_emb) = g.hsplit(self.spec.encoded_dim());
            let mut grad = DenseArray::zeros(params.value("pred.d_embed")?.shape());
            for (i, &d) in tape.d.iter().enumerate() {
                for (dst, src) in grad.row_mut(d).iter_mut().zip(g_emb.row(i)) {
                    *dst += src;
                }
            }
            params.accumulate_grad("pred.d_embed", &grad)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub spec: CriticSpec,
}

#[derive(Debug, Clone)]
pub struct CriticTape {
    z: Vec<usize>,
    d: Vec<usize>,
    /// Input to each layer.
    inputs: Vec<DenseArray>,
    /// Pre-activation of each non-final layer.
    pre: Vec<DenseArray>,
    sn: Vec<SpectralNorm>,
    pub output: DenseArray,
}

impl CriticTape {
    pub fn spectral(&self) -> &[SpectralNorm] {
        &self.sn
    }

    /// Concatenated `[Enc(Z), Enc(D)]` rows.
    pub fn embedded_input(&self) -> &DenseArray {
        &self.inputs[0]
    }
}

impl Critic {
    pub fn init(spec: CriticSpec, seed: u64) -> Result<(Self, ParameterStore)> {
        spec.validate()?;
        let mut rng = seed::rng(seed);
        let mut store = ParameterStore::new();
        store.insert(
            "critic.z_embed",
            embedding(&mut rng, spec.n_sites, spec.z_embed_dim.max(1)),
            None,
        )?;
        store.insert(
            "critic.d_embed",
            embedding(&mut rng, spec.n_strata, spec.d_embed_dim.max(1)),
            None,
        )?;
        for (l, (input, out)) in spec.layer_dims().into_iter().enumerate() {
            let w = fan_in_uniform(&mut rng, out, input);
            let u = unit_vector(&mut rng, out);
            store.insert(format!("critic.layer{l}.weight"), w, Some(u))?;
            store.insert(
                format!("critic.layer{l}.bias"),
                DenseArray::zeros(&[out]),
                None,
            )?;
        }
        Ok((Self { spec }, store))
    }

    fn embed(&self, params: &ParameterStore, z: &[usize], d: &[usize]) -> Result<DenseArray> {
        check_ids(z, self.spec.n_sites, "site")?;
        check_ids(d, self.spec.n_strata, "stratum")?;
        if z.len() != d.len() || z.is_empty() {
            return Err(Error::dim(format!(
                "{} sites vs {} strata",
                z.len(),
                d.len()
            )));
        }
        let ze = params.value("critic.z_embed")?.gather_rows(z)?;
        let de = params.value("critic.d_embed")?.gather_rows(d)?;
        match (self.spec.z_embed_dim, self.spec.d_embed_dim) {
            (0, _) => Ok(de),
            (_, 0) => Ok(ze),
            _ => ze.hcat(&de),
        }
    }

    /// Pure forward pass. Spectral normalization runs one power iteration from
    /// the stored vectors; call [`Critic::commit_spectral_state`] to persist them.
    pub fn forward(&self, params: &ParameterStore, z: &[usize], d: &[usize]) -> Result<CriticTape> {
        let h = self.embed(params, z, d)?;
        self.run_layers(params, h, z, d)
    }

    /// The MLP applied to arbitrary `[Enc(Z), Enc(D)]` rows.
    pub fn forward_embedded(&self, params: &ParameterStore, h: &DenseArray) -> Result<DenseArray> {
        let width = self.spec.z_embed_dim + self.spec.d_embed_dim;
        if h.shape().len() != 2 || h.cols() != width {
            return Err(Error::dim(format!(
                "embedded input {:?}, expected {width} columns",
                h.shape()
            )));
        }
        Ok(self.run_layers(params, h.clone(), &[], &[])?.output)
    }

    fn run_layers(
        &self,
        params: &ParameterStore,
        mut h: DenseArray,
        z: &[usize],
        d: &[usize],
    ) -> Result<CriticTape> {
        let n = self.spec.n_layers;
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n.saturating_sub(1));
        let mut sns = Vec::with_capacity(n);
        for l in 0..n {
            let wp = params.get(&format!("critic.layer{l}.weight"))?;
            let u = wp
                .sn_u
                .as_ref()
                .ok_or_else(|| Error::State(format!("critic layer {l} lacks spectral state")))?;
            let sn = spectral_normalize(&wp.value, u, 1)?;
            let out = affine_forward(
                &h,
                &sn.w_sn,
                params.value(&format!("critic.layer{l}.bias"))?,
            )?;
            inputs.push(h);
            sns.push(sn);
            if l + 1 < n {
                h = leaky_relu(&out, self.spec.leaky_slope);
                pre.push(out);
            } else {
                h = out;
            }
        }
        Ok(CriticTape {
            z: z.to_vec(),
            d: d.to_vec(),
            inputs,
            pre,
            sn: sns,
            output: h,
        })
    }

    pub fn commit_spectral_state(
        &self,
        params: &mut ParameterStore,
        tape: &CriticTape,
    ) -> Result<()> {
        for (l, sn) in tape.sn.iter().enumerate() {
            params.get_mut(&format!("critic.layer{l}.weight"))?.sn_u = Some(sn.u.clone());
        }
        Ok(())
    }

    /// Backpropagate `∂L/∂c`, accumulating into the store's gradients.
    pub fn backward(
        &self,
        params: &mut ParameterStore,
        tape: &CriticTape,
        grad_out: &DenseArray,
    ) -> Result<()> {
        let n = self.spec.n_layers;
        let mut g = grad_out.clone();
        for l in (0..n).rev() {
            if l + 1 < n {
                g = leaky_relu_backward(&tape.pre[l], &g, self.spec.leaky_slope)?;
            }
            let (gx, dw_sn, db) = affine_backward(&tape.inputs[l], &tape.sn[l].w_sn, &g)?;
            let dw = spectral_backward(&tape.sn[l], &dw_sn)?;
            params.accumulate_grad(&format!("critic.layer{l}.weight"), &dw)?;
            params.accumulate_grad(&format!("critic.layer{l}.bias"), &db)?;
            g = gx;
        }
        let (gz, gd) = match (self.spec.z_embed_dim, self.spec.d_embed_dim) {
            (0, _) => (None, Some(g)),
            (_, 0) => (Some(g), None),
            (ez, _) => {
                let (a, b) = g.hsplit(ez);
                (Some(a), Some(b))
            }
        };
        let scatter = |params: &mut ParameterStore,
                       name: &str,
                       ids: &[usize],
                       g: Option<DenseArray>|
         -> Result<()> {
            let mut grad = DenseArray::zeros(params.value(name)?.shape());
            if let Some(g) = g {
                for (i, &id) in ids.iter().enumerate() {
                    for (dst, src) in grad.row_mut(id).iter_mut().zip(g.row(i)) {
                        *dst += src;
                    }
                }
            }
            params.accumulate_grad(name, &grad)
        };
        scatter(params, "critic.z_embed", &tape.z, gz)?;
        scatter(params, "critic.d_embed", &tape.d, gd)?;
        Ok(())
    }
}
