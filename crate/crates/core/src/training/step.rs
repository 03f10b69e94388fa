//! One optimization step: both cycles, contrastive sets, then a discriminator
//! update followed by a generator and head update.

use std::time::Instant;

use derain_tensor::{lit, Graph, Real, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::config::TrainConfig;
use super::pool::ImagePool;
use super::schedule::lr_at;
use crate::data::UnpairedBatch;
use crate::error::{DerainError, Result};
use crate::losses::{
    adversarial_d_var, adversarial_g_var, color_cycle_var, frequency_var, info_nce_var, ContrastiveSet, NegativesMode,
};
use crate::networks::{init_params, Binding, Cgb, ModelState, ParamSet, Role};

/// Added to code norms before normalization on the training path.
pub const CODE_EPS: f64 = 1e-7;

/// Tape nodes of both cycles for one unpaired sample.
#[derive(Clone, Debug)]
pub struct CyclePack {
    pub r: Var,
    pub n: Var,
    /// `G_R2N(r)`.
    pub n_r: Var,
    /// `G_N2R(n_r)`.
    pub r_star: Var,
    /// `G_N2R(n)`, absent without the backward cycle.
    pub r_n: Option<Var>,
    /// `G_R2N(r_n)`, absent without the backward cycle.
    pub n_star: Option<Var>,
    /// Tap activations of `r` in `G_R2N`, `n_r` in `G_N2R`, `n` in `G_N2R` and
    /// `r_n` in `G_R2N`, in that order; empty when no taps were requested.
    pub r_taps: Vec<Var>,
    pub n_r_taps: Vec<Var>,
    pub n_taps: Vec<Var>,
    pub r_n_taps: Vec<Var>,
}

impl CyclePack {
    /// `(query, key)` feature taps of a stream: translations are queries.
    pub fn stream(&self, cgb: Cgb) -> (&[Var], &[Var]) {
        match cgb {
            Cgb::Forward => (&self.n_r_taps, &self.r_taps),
            Cgb::Backward => (&self.r_n_taps, &self.n_taps),
        }
    }
}

/// Runs `r → n_r → r*` and optionally `n → r_n → n*` with trainable
/// generators, collecting encoder taps on all four passes.
pub fn run_cycles<T: Real>(
    g: &mut Graph<T>,
    model: &ModelState<T>,
    batch: (&Tensor<T>, &Tensor<T>),
    taps: &[usize],
    use_backward_cycle: bool,
) -> Result<CyclePack> {
    let gen = model.generator();
    let r = g.constant(batch.0.clone());
    let n = g.constant(batch.1.clone());
    let fwd = gen.forward(g, &model.g_r2n, Binding::Trainable, r, taps)?;
    let n_r = fwd.output.expect("full pass");
    let rec = gen.forward(g, &model.g_n2r, Binding::Trainable, n_r, taps)?;
    let mut pack = CyclePack {
        r,
        n,
        n_r,
        r_star: rec.output.expect("full pass"),
        r_n: None,
        n_star: None,
        r_taps: fwd.taps,
        n_r_taps: rec.taps,
        n_taps: Vec::new(),
        r_n_taps: Vec::new(),
    };
    if use_backward_cycle {
        let bwd = gen.forward(g, &model.g_n2r, Binding::Trainable, n, taps)?;
        let r_n = bwd.output.expect("full pass");
        let rec = gen.forward(g, &model.g_r2n, Binding::Trainable, r_n, taps)?;
        pack.r_n = Some(r_n);
        pack.n_star = rec.output;
        pack.n_taps = bwd.taps;
        pack.r_n_taps = rec.taps;
    }
    Ok(pack)
}

/// Sampled indices for one stream at one tap layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSample {
    /// Shared locations of queries and positives.
    pub locations: Vec<usize>,
    /// Locations in the opposite stream's query map used as external negatives.
    pub external: Vec<usize>,
}

/// Draws locations for every tap layer of a stream. Each layer consumes
/// `locations` then `external` from `rng`, both without replacement.
pub fn sample_stream<R: Rng + ?Sized>(extents: &[usize], n_locations: usize, n_external: usize, rng: &mut R) -> Result<Vec<LayerSample>> {
    extents
        .iter()
        .map(|&extent| {
            if n_locations > extent || n_external > extent {
                return Err(DerainError::Config(format!(
                    "cannot sample {n_locations} locations and {n_external} externals from {extent} positions"
                )));
            }
            Ok(LayerSample {
                locations: sample(rng, extent, n_locations).into_vec(),
                external: sample(rng, extent, n_external).into_vec(),
            })
        })
        .collect()
}

/// Materializes per-query sets from projected codes: query `i` gets positive
/// `keys[i]`, internal negatives `keys[j ≠ i]` (unless external-only) and
/// every row of `external`.
pub fn build_contrastive_sets(queries: &Tensor<f64>, keys: &Tensor<f64>, external: Option<&Tensor<f64>>, mode: NegativesMode) -> Result<Vec<ContrastiveSet>> {
    let (s, d) = (queries.shape()[0], queries.shape()[1]);
    if keys.shape() != queries.shape() {
        return Err(DerainError::Dimension(format!("query {:?} and key {:?} blocks differ", queries.shape(), keys.shape())));
    }
    let row = |t: &Tensor<f64>, i: usize| t.data()[i * d..(i + 1) * d].to_vec();
    let ext_rows: Vec<Vec<f64>> = match (mode, external) {
        (NegativesMode::InternalOnly, _) | (_, None) => Vec::new(),
        (_, Some(e)) => (0..e.shape()[0]).map(|i| row(e, i)).collect(),
    };
    let internal = mode != NegativesMode::ExternalOnly || external.is_none();
    (0..s)
        .map(|i| {
            let mut negatives: Vec<Vec<f64>> = if internal { (0..s).filter(|&j| j != i).map(|j| row(keys, j)).collect() } else { Vec::new() };
            negatives.extend(ext_rows.iter().cloned());
            ContrastiveSet::new(row(queries, i), row(keys, i), negatives)
        })
        .collect()
}

/// Losses and bookkeeping of one step; values are batch means.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iteration: u64,
    pub epoch: usize,
    pub lr: f64,
    pub l_cont: f64,
    pub l_colorcyc: f64,
    pub l_adv_g: f64,
    pub l_adv_d: f64,
    pub l_freq: f64,
    pub l_total: f64,
    pub wall_ms: u64,
}

/// Independent random streams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngStreams {
    pub data: ChaCha8Rng,
    pub locations: ChaCha8Rng,
    pub pool: ChaCha8Rng,
}

/// Stream ids derived from one seed.
pub mod stream {
    pub const INIT: u64 = 0;
    pub const DATA: u64 = 1;
    pub const LOCATIONS: u64 = 2;
    pub const POOL: u64 = 3;
}

pub fn seeded_stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Optimizer moments in `ModelState::sets` order.
pub type Optimizers<T> = [Adam<T>; 5];

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub model: ModelState<T>,
    pub optimizers: Optimizers<T>,
    pub iteration: u64,
    pub epoch: usize,
    pub rngs: RngStreams,
    pub pool_r: ImagePool<T>,
    pub pool_n: ImagePool<T>,
}

impl<T: Real> TrainState<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.training.seed;
        let model: ModelState<T> = init_params(&mut seeded_stream(seed, stream::INIT), &cfg.arch)?;
        let (b1, b2) = (cfg.training.adam_beta1, cfg.training.adam_beta2);
        let optimizers = model.sets().map(|s| Adam::new(s, b1, b2));
        Ok(TrainState {
            model,
            optimizers,
            iteration: 0,
            epoch: 0,
            rngs: RngStreams {
                data: seeded_stream(seed, stream::DATA),
                locations: seeded_stream(seed, stream::LOCATIONS),
                pool: seeded_stream(seed, stream::POOL),
            },
            pool_r: ImagePool::new(cfg.training.image_pool_size),
            pool_n: ImagePool::new(cfg.training.image_pool_size),
        })
    }
}

/// Generator gradients of the last step, before the optimizer consumed them.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorGrads<T> {
    pub g_r2n: Vec<Option<Tensor<T>>>,
    pub g_n2r: Vec<Option<Tensor<T>>>,
    pub heads: Vec<Option<Tensor<T>>>,
}

/// Owns the configuration and state and performs steps.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub state: TrainState<T>,
    /// When false the discriminators are evaluated but not updated.
    pub update_discriminators: bool,
    /// Keep a copy of the generator gradients of each step.
    pub capture_generator_grads: bool,
    pub last_generator_grads: Option<GeneratorGrads<T>>,
    /// Report `wall_ms = 0`.
    pub deterministic: bool,
}

fn accumulate<T: Real>(acc: &mut [Option<Tensor<T>>], grads: Vec<Option<Tensor<T>>>, scale: f64) {
    let s: T = lit(scale);
    for (slot, g) in acc.iter_mut().zip(grads) {
        let Some(g) = g else { continue };
        let g = g.map(|v| v * s);
        match slot {
            Some(a) => a.add_assign(&g),
            None => *slot = Some(g),
        }
    }
}

fn empty_grads<T>(set: &ParamSet<T>) -> Vec<Option<Tensor<T>>>
where
    T: Real,
{
    vec![None; set.len()]
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let state = TrainState::new(&cfg)?;
        let deterministic = cfg.training.deterministic;
        Ok(Trainer::from_state(cfg, state, deterministic))
    }

    pub fn from_state(cfg: TrainConfig, state: TrainState<T>, deterministic: bool) -> Self {
        Trainer {
            cfg,
            state,
            update_discriminators: true,
            capture_generator_grads: false,
            last_generator_grads: None,
            deterministic,
        }
    }

    fn taps(&self) -> Vec<usize> {
        if self.cfg.toggles.use_cont && self.cfg.weights.lambda1 > 0.0 {
            self.cfg.arch.tap_layers.clone()
        } else {
            Vec::new()
        }
    }

    /// One discriminator update then one generator/head update on `batch`.
    pub fn train_step(&mut self, batch: &[UnpairedBatch]) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(DerainError::Domain("empty batch".into()));
        }
        let start = Instant::now();
        let lr = lr_at(self.state.epoch, &self.cfg)?;
        let toggles = self.cfg.toggles.clone();
        let backward = toggles.use_backward_cycle;
        let kind = self.cfg.training.adversarial;
        let taps = self.taps();
        let inv_b = 1.0 / batch.len() as f64;

        let mut graphs = Vec::with_capacity(batch.len());
        for sample in batch {
            let (r, n) = (sample.rainy.tensor().cast::<T>(), sample.clean.tensor().cast::<T>());
            let mut g = Graph::new();
            let pack = run_cycles(&mut g, &self.state.model, (&r, &n), &taps, backward)?;
            graphs.push((g, pack));
        }

        let l_adv_d = self.discriminator_update(&graphs, lr, inv_b)?;

        let model = &self.state.model;
        let disc = model.discriminator();
        let heads = model.projection_heads();
        let mut sums = StepMetrics::default();
        let mut acc = [empty_grads(&model.g_r2n), empty_grads(&model.g_n2r), empty_grads(&model.heads)];
        for (g, pack) in graphs.iter_mut() {
            let mut terms: Vec<(Var, f64)> = Vec::new();

            let fake_n = disc.forward(g, &model.d_n, Binding::Frozen, pack.n_r)?;
            let mut adv = adversarial_g_var(g, fake_n, kind);
            if let Some(r_n) = pack.r_n {
                let fake_r = disc.forward(g, &model.d_r, Binding::Frozen, r_n)?;
                let adv_r = adversarial_g_var(g, fake_r, kind);
                adv = g.add(adv, adv_r)?;
            }
            terms.push((adv, self.cfg.weights.lambda3));
            let l_adv_g = g.value(adv).item();

            let mut l_colorcyc = T::zero();
            if toggles.use_colorcyc {
                let mut cyc = color_cycle_var(g, pack.r, pack.r_star)?;
                if let Some(n_star) = pack.n_star {
                    let back = color_cycle_var(g, pack.n, n_star)?;
                    cyc = g.add(cyc, back)?;
                }
                l_colorcyc = g.value(cyc).item();
                terms.push((cyc, self.cfg.weights.lambda2));
            }

            let mut l_freq = T::zero();
            if toggles.use_freq {
                let scale = self.cfg.training.freq_scale;
                let mut freq = frequency_var(g, pack.r, pack.r_star, scale)?;
                if let Some(n_star) = pack.n_star {
                    let back = frequency_var(g, pack.n, n_star, scale)?;
                    freq = g.add(freq, back)?;
                }
                l_freq = g.value(freq).item();
                terms.push((freq, self.cfg.weights.lambda4));
            }

            let mut l_cont = T::zero();
            if !taps.is_empty() {
                let cont = contrastive_term(g, pack, model, &heads, &self.cfg, &mut self.state.rngs.locations)?;
                l_cont = g.value(cont).item();
                terms.push((cont, self.cfg.weights.lambda1));
            }

            let total = g.weighted_sum(&terms)?;
            let l_total = g.value(total).item();
            let it = self.state.iteration;
            for (name, v) in [("l_cont", l_cont), ("l_colorcyc", l_colorcyc), ("l_adv_g", l_adv_g), ("l_freq", l_freq), ("l_total", l_total)] {
                if !v.is_finite() {
                    return Err(DerainError::Numeric(format!("{name} is not finite at iteration {it}")));
                }
            }
            g.backward(total)?;
            accumulate(&mut acc[0], model.g_r2n.grads(g), inv_b);
            accumulate(&mut acc[1], model.g_n2r.grads(g), inv_b);
            accumulate(&mut acc[2], model.heads.grads(g), inv_b);

            let f = |v: T| v.to_f64().unwrap_or(f64::NAN) * inv_b;
            sums.l_cont += f(l_cont);
            sums.l_colorcyc += f(l_colorcyc);
            sums.l_adv_g += f(l_adv_g);
            sums.l_freq += f(l_freq);
            sums.l_total += f(l_total);
        }
        drop(graphs);

        if self.capture_generator_grads {
            self.last_generator_grads = Some(GeneratorGrads { g_r2n: acc[0].clone(), g_n2r: acc[1].clone(), heads: acc[2].clone() });
        }
        let [a_r2n, a_n2r, _, _, a_heads] = &mut self.state.optimizers;
        a_r2n.step(&mut self.state.model.g_r2n, &acc[0], lr);
        a_n2r.step(&mut self.state.model.g_n2r, &acc[1], lr);
        a_heads.step(&mut self.state.model.heads, &acc[2], lr);

        let metrics = StepMetrics {
            iteration: self.state.iteration,
            epoch: self.state.epoch,
            lr,
            l_adv_d,
            wall_ms: if self.deterministic { 0 } else { start.elapsed().as_millis() as u64 },
            ..sums
        };
        self.state.iteration += 1;
        Ok(metrics)
    }

    /// Updates `D_N` on `n` vs pooled `n_r` and `D_R` on `r` vs pooled `r_n`.
    /// Returns the batch-mean discriminator loss before the update.
    fn discriminator_update(&mut self, graphs: &[(Graph<T>, CyclePack)], lr: f64, inv_b: f64) -> Result<f64> {
        let kind = self.cfg.training.adversarial;
        let state = &mut self.state;
        let disc = state.model.discriminator();
        let mut acc_n = empty_grads(&state.model.d_n);
        let mut acc_r = empty_grads(&state.model.d_r);
        let mut total = 0.0;
        for (g, pack) in graphs {
            let fake_n = state.pool_n.query(g.value(pack.n_r).clone(), &mut state.rngs.pool);
            let fake_r = pack.r_n.map(|v| state.pool_r.query(g.value(v).clone(), &mut state.rngs.pool));
            let mut dg = Graph::new();
            let real = dg.constant(g.value(pack.n).clone());
            let fake = dg.constant(fake_n);
            let real_logits = disc.forward(&mut dg, &state.model.d_n, Binding::Trainable, real)?;
            let fake_logits = disc.forward(&mut dg, &state.model.d_n, Binding::Trainable, fake)?;
            let mut loss = adversarial_d_var(&mut dg, real_logits, fake_logits, kind)?;
            if let Some(fake_r) = fake_r {
                let real = dg.constant(g.value(pack.r).clone());
                let fake = dg.constant(fake_r);
                let real_logits = disc.forward(&mut dg, &state.model.d_r, Binding::Trainable, real)?;
                let fake_logits = disc.forward(&mut dg, &state.model.d_r, Binding::Trainable, fake)?;
                let l = adversarial_d_var(&mut dg, real_logits, fake_logits, kind)?;
                loss = dg.add(loss, l)?;
            }
            let value = dg.value(loss).item().to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(DerainError::Numeric(format!("l_adv_d is not finite at iteration {}", state.iteration)));
            }
            total += value * inv_b;
            if self.update_discriminators {
                dg.backward(loss)?;
                accumulate(&mut acc_n, state.model.d_n.grads(&dg), inv_b);
                accumulate(&mut acc_r, state.model.d_r.grads(&dg), inv_b);
            }
        }
        if self.update_discriminators {
            let [_, _, a_r, a_n, _] = &mut state.optimizers;
            a_n.step(&mut state.model.d_n, &acc_n, lr);
            a_r.step(&mut state.model.d_r, &acc_r, lr);
        }
        Ok(total)
    }
}

fn extent<T: Real>(g: &Graph<T>, v: Var) -> usize {
    let s = g.shape(v);
    s[1] * s[2]
}

/// Mean contrastive loss over streams and tap layers.
fn contrastive_term<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    pack: &CyclePack,
    model: &ModelState<T>,
    heads: &crate::networks::ProjectionHeads,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Var> {
    let streams: &[Cgb] = if pack.r_n.is_some() { &[Cgb::Forward, Cgb::Backward] } else { &[Cgb::Forward] };
    let n_loc = cfg.contrastive.n_locations;
    let n_ext = cfg.external_count();
    let mode = cfg.toggles.negatives_mode;
    let mut losses = Vec::new();
    for &cgb in streams {
        let (queries, keys) = pack.stream(cgb);
        let other = if cgb == Cgb::Forward { Cgb::Backward } else { Cgb::Forward };
        let (other_queries, _) = pack.stream(other);
        let extents: Vec<usize> = queries.iter().map(|&v| extent(g, v)).collect();
        let samples = sample_stream(&extents, n_loc, n_ext, rng)?;
        for (tap, s) in samples.iter().enumerate() {
            let q = heads.project(g, &model.heads, Binding::Trainable, tap, cgb, Role::Query, queries[tap], &s.locations)?;
            let k = heads.project(g, &model.heads, Binding::Trainable, tap, cgb, Role::Key, keys[tap], &s.locations)?;
            let e = if n_ext > 0 {
                Some(heads.project(g, &model.heads, Binding::Trainable, tap, other, Role::Query, other_queries[tap], &s.external)?)
            } else {
                None
            };
            let l = info_nce_var(g, q, k, e, mode, cfg.contrastive.tau, CODE_EPS)?;
            losses.push((l, 0.0));
        }
    }
    let w = 1.0 / losses.len() as f64;
    losses.iter_mut().for_each(|t| t.1 = w);
    Ok(g.weighted_sum(&losses)?)
}

/// Contrastive sets of one stream at every tap layer, built from concrete
/// feature stacks with the same sampling and projection as training.
/// `other_queries` is the opposite stream's query stack (the external pool).
pub fn build_stream_sets<R: Rng + ?Sized>(
    model: &ModelState<f64>,
    cgb: Cgb,
    queries: &crate::networks::FeatureStack<f64>,
    keys: &crate::networks::FeatureStack<f64>,
    other_queries: Option<&crate::networks::FeatureStack<f64>>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<Vec<ContrastiveSet>>> {
    let heads = model.projection_heads();
    let other = if cgb == Cgb::Forward { Cgb::Backward } else { Cgb::Forward };
    let n_ext = if other_queries.is_some() { cfg.external_count() } else { 0 };
    let extents: Vec<usize> = queries.layers.iter().map(|(_, t)| t.shape()[1] * t.shape()[2]).collect();
    let samples = sample_stream(&extents, cfg.contrastive.n_locations, n_ext, rng)?;
    let mut out = Vec::with_capacity(samples.len());
    for (tap, s) in samples.iter().enumerate() {
        let mut g = Graph::new();
        let qf = g.constant(queries.layers[tap].1.clone());
        let kf = g.constant(keys.layers[tap].1.clone());
        let q = heads.project(&mut g, &model.heads, Binding::Frozen, tap, cgb, Role::Query, qf, &s.locations)?;
        let k = heads.project(&mut g, &model.heads, Binding::Frozen, tap, cgb, Role::Key, kf, &s.locations)?;
        let e = match other_queries {
            Some(stack) if n_ext > 0 => {
                let ef = g.constant(stack.layers[tap].1.clone());
                let e = heads.project(&mut g, &model.heads, Binding::Frozen, tap, other, Role::Query, ef, &s.external)?;
                Some(g.value(e).clone())
            }
            _ => None,
        };
        out.push(build_contrastive_sets(g.value(q), g.value(k), e.as_ref(), cfg.toggles.negatives_mode)?);
    }
    Ok(out)
}
