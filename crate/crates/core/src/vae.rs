//! Variational autoencoders whose latent space is the base of a covering map.
//!
//! The encoder produces a Gaussian on the Euclidean cover. Samples are drawn
//! there with the usual reparameterization and pushed to the base by the
//! covering projection, which is built from `mod`/`select` primitives so the
//! whole pipeline stays differentiable almost everywhere. The KL term is the
//! closed-form Gaussian KL on the cover, an upper bound for the KL between
//! the pushforwards.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, sigmoid, AdamConfig, Parameter, PlateauScheduler, Tape, Tensor, Var};
use crate::covering::CoveringMap;
use crate::data::{ImageSet, Raster};
use crate::density::{
    kl_gaussian_analytic, kl_numeric_base, required_window, GaussianParams, GridSpec, WrappedDensity,
};
use crate::error::{domain, Error, Result};

/// Added to the softplus of every diagonal scale entry.
pub const SCALE_FLOOR: f64 = 1e-4;
pub const LEAKY_SLOPE: f64 = 0.01;

pub const KVAE_MAGIC: &[u8; 4] = b"KVAE";
pub const KVAE_VERSION: u32 = 1;

/// Latent space of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentSpec {
    /// Plain VAE on `R^d`, `d` in 2..=4.
    Euclidean(usize),
    /// Unit torus `[0,1)^2`.
    Torus2,
    /// Klein bottle `[0,1)^2` via the composed covering.
    Klein,
}

impl LatentSpec {
    /// The five latents compared by the ablation.
    pub const ABLATION: [LatentSpec; 5] = [
        LatentSpec::Euclidean(2),
        LatentSpec::Euclidean(3),
        LatentSpec::Euclidean(4),
        LatentSpec::Torus2,
        LatentSpec::Klein,
    ];

    pub fn dim(self) -> usize {
        match self {
            LatentSpec::Euclidean(d) => d,
            LatentSpec::Torus2 | LatentSpec::Klein => 2,
        }
    }

    pub fn covering(self) -> CoveringMap {
        match self {
            LatentSpec::Euclidean(d) => CoveringMap::Identity(d),
            LatentSpec::Torus2 => CoveringMap::UNIT_TORUS,
            LatentSpec::Klein => CoveringMap::KleinComposed,
        }
    }

    /// Mean entries plus the lower triangle of the scale factor.
    pub fn encoder_outputs(self) -> usize {
        let d = self.dim();
        d + d * (d + 1) / 2
    }

    fn validate(self) -> Result<()> {
        match self {
            LatentSpec::Euclidean(d) if !(2..=4).contains(&d) => Err(Error::Config(format!(
                "euclidean latent dimension {d} is not in 2..=4"
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for LatentSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LatentSpec::Euclidean(d) => write!(f, "euclidean{d}"),
            LatentSpec::Torus2 => f.write_str("torus"),
            LatentSpec::Klein => f.write_str("klein"),
        }
    }
}

impl FromStr for LatentSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let spec = match s {
            "torus" | "torus2" => LatentSpec::Torus2,
            "klein" => LatentSpec::Klein,
            _ => match s.strip_prefix("euclidean").and_then(|d| d.parse().ok()) {
                Some(d) => LatentSpec::Euclidean(d),
                None => {
                    return Err(Error::Config(format!(
                        "unknown latent `{s}` (euclidean2|euclidean3|euclidean4|torus|klein)"
                    )))
                }
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Position of `L[i][j]` (`j <= i`) among the encoder's scale outputs.
#[inline]
fn tri(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

/// Layer widths and prior of a model. Serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub latent: LatentSpec,
    pub input: usize,
    /// Hidden widths of the encoder; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub slope: f64,
    pub prior_mean: Vec<f64>,
    /// Prior covariance is `prior_var * I`.
    pub prior_var: f64,
}

impl Architecture {
    /// Prior centred in the unit square with covariance `0.1 I`.
    pub fn new(latent: LatentSpec, input: usize, hidden: Vec<usize>) -> Self {
        Self {
            latent,
            input,
            hidden,
            slope: LEAKY_SLOPE,
            prior_mean: vec![0.5; latent.dim()],
            prior_var: 0.1,
        }
    }

    pub fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(&self.hidden);
        w.push(self.latent.encoder_outputs());
        w
    }

    pub fn decoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.latent.dim()];
        w.extend(self.hidden.iter().rev());
        w.push(self.input);
        w
    }

    pub fn prior(&self) -> Result<GaussianParams> {
        GaussianParams::isotropic(self.prior_mean.clone(), self.prior_var.sqrt())
    }

    fn validate(&self) -> Result<()> {
        self.latent.validate()?;
        if self.input == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.prior_mean.len() != self.latent.dim() {
            return Err(Error::Config("prior mean has the wrong dimension".into()));
        }
        if !(self.prior_var > 0.0 && self.prior_var.is_finite()) {
            return Err(Error::Config("prior variance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// 900-1024-512-128-32 encoder.
    Demo,
    /// One hidden layer of 64.
    Ablation,
}

impl Preset {
    pub fn hidden(self) -> Vec<usize> {
        match self {
            Preset::Demo => vec![1024, 512, 128, 32],
            Preset::Ablation => vec![64],
        }
    }

    pub fn train_config(self, seed: u64) -> TrainConfig {
        let (lr, epochs, kl_weight) = match self {
            Preset::Demo => (1e-3, 50, 1e-2),
            Preset::Ablation => (1e-2, 200, 1e-3),
        };
        TrainConfig {
            preset: self,
            batch_size: 1024,
            epochs,
            lr,
            kl_weight,
            seed,
            scheduler_factor: 0.99,
            scheduler_patience: 10,
            adam: AdamConfig::default(),
            latent_var_sample: 2048,
            spot_check_every: 100,
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "demo" => Ok(Preset::Demo),
            "ablation" => Ok(Preset::Ablation),
            _ => Err(Error::Config(format!("unknown preset `{s}` (demo|ablation)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: Preset,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub kl_weight: f64,
    pub seed: u64,
    pub scheduler_factor: f64,
    pub scheduler_patience: u32,
    pub adam: AdamConfig,
    /// Items (from the front of the dataset) used for the latent variance;
    /// fewer than two log it as NaN.
    pub latent_var_sample: usize,
    /// Compare the numeric base KL with the cover KL on one item of every
    /// `n`-th batch; 0 disables the check. Periodic latents only.
    pub spot_check_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epochs must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return bad("KL weight must be non-negative");
        }
        if !(self.scheduler_factor > 0.0 && self.scheduler_factor <= 1.0) || self.scheduler_patience == 0 {
            return bad("scheduler needs a factor in (0, 1] and positive patience");
        }
        Ok(())
    }
}

/// Loss components averaged over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    /// `-recon + kl_weight * kl`.
    pub loss: f64,
    /// Bernoulli log-likelihood, mean over pixels.
    pub recon: f64,
    /// Gaussian KL to the prior on the cover.
    pub kl: f64,
}

impl ElboTerms {
    pub fn elbo(&self) -> f64 {
        -self.loss
    }
}

struct Graph {
    loss: Var,
    recon: Var,
    kl: Var,
    /// Pre-projection latent, `batch x d`.
    cover_z: Var,
    encoded: Var,
}

/// A VAE with MLP encoder and decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub arch: Architecture,
    /// Encoder layers (weight `in x out`, bias `1 x out`), then decoder layers.
    pub params: Vec<Parameter>,
    pub kl_weight: f64,
}

impl VaeModel {
    /// Weights and biases drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(arch: Architecture, kl_weight: f64, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut params = Vec::new();
        for (prefix, widths) in [("enc", arch.encoder_widths()), ("dec", arch.decoder_widths())] {
            for (k, w) in widths.windows(2).enumerate() {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let mut draw =
                    |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
                let weight = Tensor::new(w[0], w[1], draw(w[0] * w[1]))?;
                let bias = Tensor::new(1, w[1], draw(w[1]))?;
                params.push(Parameter::new(format!("{prefix}.{k}.weight"), weight));
                params.push(Parameter::new(format!("{prefix}.{k}.bias"), bias));
            }
        }
        Ok(Self {
            arch,
            params,
            kl_weight,
        })
    }

    pub fn latent(&self) -> LatentSpec {
        self.arch.latent
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn encoder_layers(&self) -> usize {
        self.arch.hidden.len() + 1
    }

    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(i, p))
            .collect()
    }

    fn mlp(&self, tape: &mut Tape, layers: &[Var], mut h: Var) -> Result<Var> {
        let n = layers.len() / 2;
        for k in 0..n {
            h = tape.matmul(h, layers[2 * k])?;
            h = tape.add_bias(h, layers[2 * k + 1])?;
            if k + 1 < n {
                h = tape.leaky_relu(h, self.arch.slope);
            }
        }
        Ok(h)
    }

    /// Encoder outputs with the scale diagonal made positive.
    fn encode_graph(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<(Var, Vec<Var>, Vec<Var>)> {
        let d = self.latent().dim();
        let out = self.mlp(tape, &vars[..2 * self.encoder_layers()], x)?;
        let mu = (0..d).map(|i| tape.cols(out, i, 1)).collect::<Result<Vec<_>>>()?;
        let mut l = Vec::with_capacity(d * (d + 1) / 2);
        for i in 0..d {
            for j in 0..=i {
                let raw = tape.cols(out, d + tri(i, j), 1)?;
                l.push(if i == j {
                    let s = tape.softplus(raw);
                    tape.add_scalar(s, SCALE_FLOOR)
                } else {
                    raw
                });
            }
        }
        let mut parts = mu.clone();
        parts.extend(&l);
        let encoded = tape.concat_cols(&parts)?;
        Ok((encoded, mu, l))
    }

    /// `project(mu + L eps)`, returning the cover point and its projection.
    fn reparameterize_graph(
        &self,
        tape: &mut Tape,
        mu: &[Var],
        l: &[Var],
        eps: &Tensor,
    ) -> Result<(Var, Var)> {
        let d = mu.len();
        let eps_cols: Vec<Var> = (0..d).map(|j| tape.constant(eps.cols_slice(j, 1))).collect();
        let mut z = Vec::with_capacity(d);
        for i in 0..d {
            let mut acc = mu[i];
            for j in 0..=i {
                let t = tape.mul(l[tri(i, j)], eps_cols[j])?;
                acc = tape.add(acc, t)?;
            }
            z.push(acc);
        }
        let cover = tape.concat_cols(&z)?;
        let projected = match self.latent() {
            LatentSpec::Euclidean(_) => cover,
            LatentSpec::Torus2 => {
                let parts: Vec<Var> = z.iter().map(|&c| tape.mod_periodic(c, 1.0)).collect();
                tape.concat_cols(&parts)?
            }
            LatentSpec::Klein => {
                let x2 = tape.mod_periodic(z[0], 2.0);
                let y1 = tape.mod_periodic(z[1], 1.0);
                let x_flip = tape.add_scalar(x2, -1.0);
                let neg = tape.scale(y1, -1.0);
                let y_flip = tape.mod_periodic(neg, 1.0);
                let x = tape.select_by_threshold(x2, 1.0, x_flip, x2)?;
                let y = tape.select_by_threshold(x2, 1.0, y_flip, y1)?;
                tape.concat_cols(&[x, y])?
            }
        };
        Ok((cover, projected))
    }

    /// Per-item `KL(q || prior)` on the cover, `batch x 1`.
    fn kl_graph(&self, tape: &mut Tape, mu: &[Var], l: &[Var]) -> Result<Var> {
        let d = mu.len();
        let s = self.arch.prior_var;
        let mut acc: Option<Var> = None;
        let mut push = |tape: &mut Tape, v: Var| -> Result<()> {
            acc = Some(match acc {
                Some(a) => tape.add(a, v)?,
                None => v,
            });
            Ok(())
        };
        for (i, &m) in mu.iter().enumerate() {
            let c = tape.add_scalar(m, -self.arch.prior_mean[i]);
            let sq = tape.mul(c, c)?;
            let t = tape.scale(sq, 1.0 / s);
            push(tape, t)?;
        }
        for i in 0..d {
            for j in 0..=i {
                let e = l[tri(i, j)];
                let sq = tape.mul(e, e)?;
                let t = tape.scale(sq, 1.0 / s);
                push(tape, t)?;
                if i == j {
                    let lg = tape.log(e);
                    let t = tape.scale(lg, -2.0);
                    push(tape, t)?;
                }
            }
        }
        let total = acc.expect("latent dimension is positive");
        let shifted = tape.add_scalar(total, -(d as f64) + d as f64 * s.ln());
        Ok(tape.scale(shifted, 0.5))
    }

    fn graph(&self, tape: &mut Tape, x: &Tensor, eps: &Tensor) -> Result<Graph> {
        let d = self.latent().dim();
        if x.cols != self.arch.input {
            return Err(Error::Shape(format!(
                "images have {} pixels, the model expects {}",
                x.cols, self.arch.input
            )));
        }
        if eps.shape() != (x.rows, d) {
            return Err(Error::Shape(format!(
                "noise is {}x{}, expected {}x{d}",
                eps.rows, eps.cols, x.rows
            )));
        }
        let vars = self.bind(tape);
        let targets = Rc::new(x.clone());
        let input = tape.constant(x.clone());
        let (encoded, mu, l) = self.encode_graph(tape, &vars, input)?;
        let (cover_z, z) = self.reparameterize_graph(tape, &mu, &l, eps)?;
        let logits = self.mlp(tape, &vars[2 * self.encoder_layers()..], z)?;
        let bce = tape.bce_with_logits(logits, targets)?;
        let per_item = tape.row_sum(bce);
        let per_image = tape.mean(per_item);
        let nll = tape.scale(per_image, 1.0 / x.cols as f64);
        let kl_items = self.kl_graph(tape, &mu, &l)?;
        let kl = tape.mean(kl_items);
        let weighted = tape.scale(kl, self.kl_weight);
        let loss = tape.add(nll, weighted)?;
        let recon = tape.scale(nll, -1.0);
        Ok(Graph {
            loss,
            recon,
            kl,
            cover_z,
            encoded,
        })
    }

    fn terms(tape: &Tape, g: &Graph) -> ElboTerms {
        ElboTerms {
            loss: tape.value(g.loss).data[0],
            recon: tape.value(g.recon).data[0],
            kl: tape.value(g.kl).data[0],
        }
    }

    /// Negative ELBO of a batch (`batch x pixels`) for the given noise.
    pub fn loss(&self, x: &Tensor, eps: &Tensor) -> Result<ElboTerms> {
        let mut tape = Tape::new();
        let g = self.graph(&mut tape, x, eps)?;
        Ok(Self::terms(&tape, &g))
    }

    /// Loss and the gradient of every parameter, in parameter order.
    pub fn loss_and_grad(&self, x: &Tensor, eps: &Tensor) -> Result<(ElboTerms, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let g = self.graph(&mut tape, x, eps)?;
        let grads = tape.gradients(g.loss)?;
        let per_param = (0..self.params.len())
            .map(|i| {
                // Parameters are bound first, so parameter i is node i.
                grads[i].clone().unwrap_or_else(|| {
                    let (r, c) = self.params[i].value.shape();
                    Tensor::zeros(r, c)
                })
            })
            .collect();
        Ok((Self::terms(&tape, &g), per_param))
    }

    /// Pre-projection latent points `mu + L eps`, `batch x d`.
    pub fn cover_latents(&self, x: &Tensor, eps: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let g = self.graph(&mut tape, x, eps)?;
        Ok(tape.value(g.cover_z).clone())
    }

    fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols != self.arch.input {
            return Err(Error::Shape(format!(
                "images have {} pixels, the model expects {}",
                x.cols, self.arch.input
            )));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let input = tape.constant(x.clone());
        let (encoded, _, _) = self.encode_graph(&mut tape, &vars, input)?;
        Ok(tape.value(encoded).clone())
    }

    /// Decoder logits for base latent points, `batch x pixels`.
    pub fn decode_logits(&self, z: &Tensor) -> Result<Tensor> {
        if z.cols != self.latent().dim() {
            return Err(Error::Shape(format!("latent points have {} coordinates", z.cols)));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let input = tape.constant(z.clone());
        let out = self.mlp(&mut tape, &vars[2 * self.encoder_layers()..], input)?;
        Ok(tape.value(out).clone())
    }
}

/// Gathers images `idx` into a `len x pixels` tensor.
pub fn batch_tensor(images: &ImageSet, idx: &[usize]) -> Tensor {
    let p = images.pixels_per_image();
    let mut data = Vec::with_capacity(idx.len() * p);
    for &i in idx {
        data.extend(images.image(i).iter().map(|&v| v as f64));
    }
    Tensor {
        rows: idx.len(),
        cols: p,
        data,
    }
}

fn gaussian_rows(d: usize, encoded: &Tensor) -> Result<Vec<GaussianParams>> {
    (0..encoded.rows)
        .map(|r| {
            let row = encoded.row(r);
            let mut l = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..=i {
                    l[i * d + j] = row[d + tri(i, j)];
                }
            }
            GaussianParams::new(row[..d].to_vec(), l).map_err(|e| match e {
                Error::Domain(m) => Error::NonFinite(format!("encoder output for item {r}: {m}")),
                e => e,
            })
        })
        .collect()
}

const EVAL_CHUNK: usize = 1024;

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n)
        .step_by(EVAL_CHUNK)
        .map(move |s| (s..(s + EVAL_CHUNK).min(n)).collect())
}

/// Variational posterior of every image, on the cover.
pub fn encode(model: &VaeModel, images: &ImageSet) -> Result<Vec<GaussianParams>> {
    let d = model.latent().dim();
    let mut out = Vec::with_capacity(images.count());
    for idx in chunks(images.count()) {
        let enc = model.encode_tensor(&batch_tensor(images, &idx))?;
        out.extend(gaussian_rows(d, &enc)?);
    }
    Ok(out)
}

/// `project(mu + L eps)` under the latent's covering.
pub fn reparameterize(params: &GaussianParams, latent: LatentSpec, eps: &[f64]) -> Result<Vec<f64>> {
    let d = params.dim();
    if d != latent.dim() || eps.len() != d {
        return Err(domain(format!(
            "latent {latent} needs {} coordinates, got mean {d} and noise {}",
            latent.dim(),
            eps.len()
        )));
    }
    let z: Vec<f64> = (0..d)
        .map(|i| {
            params.mean[i]
                + (0..=i)
                    .map(|j| params.scale_lower[i * d + j] * eps[j])
                    .sum::<f64>()
        })
        .collect();
    latent.covering().project(&z)
}

/// Standard normal noise for `rows` items.
pub fn draw_noise<R: Rng + ?Sized>(rng: &mut R, rows: usize, d: usize) -> Tensor {
    Tensor {
        rows,
        cols: d,
        data: (0..rows * d).map(|_| rng.sample(StandardNormal)).collect(),
    }
}

/// Loss components of one batch with freshly drawn noise.
pub fn elbo<R: Rng + ?Sized>(model: &VaeModel, batch: &Tensor, rng: &mut R) -> Result<ElboTerms> {
    let eps = draw_noise(rng, batch.rows, model.latent().dim());
    let t = model.loss(batch, &eps)?;
    check_terms(&t)?;
    Ok(t)
}

fn check_terms(t: &ElboTerms) -> Result<()> {
    for (name, v) in [("reconstruction", t.recon), ("KL", t.kl), ("loss", t.loss)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} term is {v}")));
        }
    }
    Ok(())
}

/// Mean over latent coordinates of the population variance of the encoded
/// means, taken on the cover.
pub fn latent_variance(model: &VaeModel, images: &ImageSet) -> Result<f64> {
    if images.count() < 2 {
        return Err(domain("latent variance needs at least two items"));
    }
    let d = model.latent().dim();
    let mut means = Vec::with_capacity(images.count() * d);
    for idx in chunks(images.count()) {
        let enc = model.encode_tensor(&batch_tensor(images, &idx))?;
        for r in 0..enc.rows {
            means.extend_from_slice(&enc.row(r)[..d]);
        }
    }
    Ok(population_variance(&means, d))
}

fn population_variance(rows: &[f64], d: usize) -> f64 {
    let n = (rows.len() / d) as f64;
    let mut total = 0.0;
    for c in 0..d {
        let col = rows.iter().skip(c).step_by(d);
        let mean = col.clone().sum::<f64>() / n;
        total += col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    }
    total / d as f64
}

/// Decoder output at the projected posterior mean of every image.
pub fn reconstruct(model: &VaeModel, images: &ImageSet) -> Result<ImageSet> {
    let d = model.latent().dim();
    let map = model.latent().covering();
    let mut out = Vec::with_capacity(images.pixels().len());
    for idx in chunks(images.count()) {
        let enc = model.encode_tensor(&batch_tensor(images, &idx))?;
        let mut z = Tensor::zeros(enc.rows, d);
        for r in 0..enc.rows {
            map.project_into(&enc.row(r)[..d], &mut z.data[r * d..(r + 1) * d])?;
        }
        let logits = model.decode_logits(&z)?;
        // Keep f32 rounding from reaching the closed ends.
        let hi = 1.0 - f32::EPSILON / 2.0;
        out.extend(
            logits
                .data
                .iter()
                .map(|&l| (sigmoid(l) as f32).clamp(f32::MIN_POSITIVE, hi)),
        );
    }
    ImageSet::new(Raster::new(images.count(), images.height(), images.width(), out)?)
}

/// One line of the training log. Epoch 0 describes the untrained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
    /// Learning rate in effect during the epoch.
    pub lr: f64,
    pub latent_var: f64,
}

/// Base KL of a pushforward pair against the cover KL used in the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpotCheck {
    pub epoch: usize,
    pub batch: usize,
    pub numeric: f64,
    pub analytic: f64,
}

impl SpotCheck {
    pub fn holds(&self, tol: f64) -> bool {
        self.numeric <= self.analytic + tol
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub spot_checks: Vec<SpotCheck>,
    /// Checks skipped because the posterior was too wide to integrate
    /// within [`SPOT_CHECK_MAX_WINDOW`].
    pub spot_checks_skipped: usize,
    /// Why training stopped early. The model holds the parameters from the
    /// end of the last finished epoch.
    pub diverged: Option<String>,
}

impl TrainReport {
    pub fn lr_reductions(&self) -> usize {
        self.log.windows(2).filter(|w| w[1].lr < w[0].lr).count()
    }
}

/// Mean loss terms of a whole dataset at fixed noise.
fn dataset_terms(model: &VaeModel, images: &ImageSet, rng: &mut ChaCha8Rng) -> Result<ElboTerms> {
    let (mut loss, mut recon, mut kl) = (0.0, 0.0, 0.0);
    for idx in chunks(images.count()) {
        let w = idx.len() as f64;
        let t = elbo(model, &batch_tensor(images, &idx), rng)?;
        loss += w * t.loss;
        recon += w * t.recon;
        kl += w * t.kl;
    }
    let n = images.count() as f64;
    Ok(ElboTerms {
        loss: loss / n,
        recon: recon / n,
        kl: kl / n,
    })
}

/// Widest preimage window a spot check will integrate over. The grid cost
/// grows with the square of the window, and a posterior this wide is close
/// to uniform on the base anyway.
pub const SPOT_CHECK_MAX_WINDOW: usize = 8;

fn spot_check(model: &VaeModel, encoded: &Tensor) -> Result<Option<(f64, f64)>> {
    let d = model.latent().dim();
    let map = model.latent().covering();
    let q = gaussian_rows(d, encoded)?.swap_remove(0);
    if required_window(&q, &map) > SPOT_CHECK_MAX_WINDOW {
        return Ok(None);
    }
    let p = model.arch.prior()?;
    let analytic = kl_gaussian_analytic(&q, &p)?;
    let numeric = kl_numeric_base(
        &WrappedDensity::new(q, map)?,
        &WrappedDensity::new(p, map)?,
        GridSpec::DEFAULT,
    )?;
    Ok(Some((numeric.value, analytic)))
}

/// Trains with Adam on shuffled mini-batches, stepping the plateau scheduler
/// on the mean epoch loss. Each log line is also written to `sink` as JSON.
pub fn train(
    model: &mut VaeModel,
    data: &ImageSet,
    cfg: &TrainConfig,
    mut sink: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.count() == 0 {
        return Err(domain("empty dataset"));
    }
    if data.pixels_per_image() != model.arch.input {
        return Err(Error::Shape(format!(
            "images have {} pixels, the model expects {}",
            data.pixels_per_image(),
            model.arch.input
        )));
    }
    model.kl_weight = cfg.kl_weight;
    let d = model.latent().dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let sample: Vec<usize> = (0..cfg.latent_var_sample.min(data.count())).collect();
    let var_sample = if sample.len() >= 2 {
        Some(data.select(&sample)?)
    } else {
        None
    };
    let latent_var = |m: &VaeModel| -> Result<f64> {
        match &var_sample {
            Some(s) => latent_variance(m, s),
            None => Ok(f64::NAN),
        }
    };

    let mut sched = PlateauScheduler::new(cfg.lr, cfg.scheduler_factor, cfg.scheduler_patience);
    let mut report = TrainReport {
        log: Vec::with_capacity(cfg.epochs + 1),
        spot_checks: Vec::new(),
        spot_checks_skipped: 0,
        diverged: None,
    };
    let mut emit = |report: &mut TrainReport, line: EpochLog| -> Result<()> {
        if let Some(w) = sink.as_deref_mut() {
            serde_json::to_writer(&mut *w, &line)?;
            w.write_all(b"\n")?;
        }
        report.log.push(line);
        Ok(())
    };

    let initial = dataset_terms(model, data, &mut rng)?;
    emit(
        &mut report,
        EpochLog {
            epoch: 0,
            elbo: initial.elbo(),
            recon: initial.recon,
            kl: initial.kl,
            lr: sched.lr,
            latent_var: latent_var(model)?,
        },
    )?;

    let mut order: Vec<usize> = (0..data.count()).collect();
    let mut batch_counter = 0usize;
    for epoch in 1..=cfg.epochs {
        let snapshot = model.params.clone();
        let lr = sched.lr;
        order.shuffle(&mut rng);
        let (mut loss, mut recon, mut kl) = (0.0, 0.0, 0.0);
        let mut failure = None;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = batch_tensor(data, idx);
            let eps = draw_noise(&mut rng, idx.len(), d);
            let mut tape = Tape::new();
            let g = model.graph(&mut tape, &x, &eps)?;
            let t = VaeModel::terms(&tape, &g);
            if let Err(e) = check_terms(&t) {
                failure = Some(format!("epoch {epoch}, batch {b}: {e}"));
                break;
            }
            if cfg.spot_check_every > 0
                && model.latent().covering().is_periodic()
                && batch_counter % cfg.spot_check_every == 0
            {
                let enc = tape.value(g.encoded);
                let first = Tensor::new(1, enc.cols, enc.row(0).to_vec())?;
                match spot_check(model, &first)? {
                    None => report.spot_checks_skipped += 1,
                    Some((numeric, analytic)) => {
                        let check = SpotCheck {
                            epoch,
                            batch: b,
                            numeric,
                            analytic,
                        };
                        if !check.holds(1e-3) {
                            log::warn!(
                                "base KL {numeric} exceeds cover KL {analytic} at epoch {epoch}, batch {b}"
                            );
                        }
                        report.spot_checks.push(check);
                    }
                }
            }
            batch_counter += 1;
            tape.backward(g.loss, &mut model.params)?;
            if let Err(e) = adam_step(&mut model.params, lr, cfg.adam) {
                failure = Some(format!("epoch {epoch}, batch {b}: {e}"));
                break;
            }
            let w = idx.len() as f64;
            loss += w * t.loss;
            recon += w * t.recon;
            kl += w * t.kl;
        }
        if let Some(msg) = failure {
            log::error!("training diverged: {msg}");
            model.params = snapshot;
            report.diverged = Some(msg);
            break;
        }
        let n = data.count() as f64;
        let (loss, recon, kl) = (loss / n, recon / n, kl / n);
        let line = EpochLog {
            epoch,
            elbo: -loss,
            recon,
            kl,
            lr,
            latent_var: latent_var(model)?,
        };
        log::info!(
            "epoch {epoch}: elbo {:.3} recon {:.3} kl {:.4} lr {lr:.3e}",
            line.elbo,
            recon,
            kl
        );
        emit(&mut report, line)?;
        sched.observe(loss);
    }
    Ok(report)
}

/// Checkpoint descriptor stored as JSON inside the binary blob.
#[derive(Serialize, Deserialize)]
struct Descriptor {
    arch: Architecture,
    kl_weight: f64,
    shapes: Vec<(String, usize, usize)>,
}

impl VaeModel {
    /// `KVAE | u32 version | u32 len | descriptor JSON | f32 weights`, all
    /// little-endian. Weights are rounded to `f32`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let desc = Descriptor {
            arch: self.arch.clone(),
            kl_weight: self.kl_weight,
            shapes: self
                .params
                .iter()
                .map(|p| (p.name.clone(), p.value.rows, p.value.cols))
                .collect(),
        };
        let json = serde_json::to_vec(&desc)?;
        let mut buf = Vec::with_capacity(12 + json.len() + 4 * self.param_count());
        buf.extend_from_slice(KVAE_MAGIC);
        buf.extend_from_slice(&KVAE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for p in &self.params {
            for v in &p.value.data {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let parse = |offset: usize, msg: String| Error::Parse {
            offset: offset as u64,
            msg,
        };
        if bytes.len() < 12 {
            return Err(parse(bytes.len(), "truncated checkpoint header".into()));
        }
        if &bytes[..4] != KVAE_MAGIC {
            return Err(parse(0, "bad magic, expected KVAE".into()));
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != KVAE_VERSION {
            return Err(parse(4, format!("unsupported version {version}")));
        }
        let len = u32_at(8) as usize;
        let body = 12 + len;
        if bytes.len() < body {
            return Err(parse(bytes.len(), "truncated architecture descriptor".into()));
        }
        let desc: Descriptor = serde_json::from_slice(&bytes[12..body])
            .map_err(|e| parse(12, format!("bad descriptor: {e}")))?;
        let mut model = VaeModel::new(desc.arch, desc.kl_weight, 0).map_err(|e| parse(12, e.to_string()))?;
        let expected: Vec<(String, usize, usize)> = model
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.rows, p.value.cols))
            .collect();
        if expected != desc.shapes {
            return Err(parse(12, "parameter shapes do not match the architecture".into()));
        }
        let total = body + 4 * model.param_count();
        if bytes.len() < total {
            return Err(parse(
                bytes.len(),
                format!("truncated weights: expected {total} bytes"),
            ));
        }
        if bytes.len() > total {
            return Err(parse(total, "trailing bytes after weights".into()));
        }
        let mut at = body;
        for p in &mut model.params {
            for v in &mut p.value.data {
                *v = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64;
                at += 4;
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
