//! Pose forecasting module: one single-layer GRU per body part, each reading
//! only the latent dimensions its part owns and emitting a factorized
//! Gaussian (mean and standard deviation) over those same dimensions for the
//! next frame.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Graph, NumericsError, Tensor, Var};
use crate::skeleton::SkeletonTopology;

/// Lower bound applied to every predicted standard deviation.
pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum PfmError {
    #[error("history is empty")]
    EmptyHistory,
    #[error("latent has width {found}, expected {expected}")]
    Shape { expected: usize, found: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PfmConfig {
    pub hidden: usize,
    pub part_aware: bool,
    pub sigma_floor: f64,
}

impl Default for PfmConfig {
    fn default() -> Self {
        Self { hidden: 128, part_aware: true, sigma_floor: DEFAULT_SIGMA_FLOOR }
    }
}

/// Per-dimension Gaussian over one frame's latent code; `std` is a standard
/// deviation, not a variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentGaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentGaussian {
    pub fn dims(&self) -> usize {
        self.mean.len()
    }
}

/// Weights of one GRU cell with fused gates in `[reset | update | candidate]`
/// column order, plus the affine output head.
#[derive(Clone, Debug, PartialEq)]
pub struct GruCellParams {
    pub w_input: Tensor,
    pub w_hidden: Tensor,
    pub b_input: Tensor,
    pub b_hidden: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl GruCellParams {
    pub const COUNT: usize = 6;

    fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_input: Tensor::zeros(input, 3 * hidden),
            w_hidden: Tensor::zeros(hidden, 3 * hidden),
            b_input: Tensor::zeros(1, 3 * hidden),
            b_hidden: Tensor::zeros(1, 3 * hidden),
            w_out: Tensor::zeros(hidden, 2 * input),
            b_out: Tensor::zeros(1, 2 * input),
        }
    }

    fn tensors(&self) -> [&Tensor; Self::COUNT] {
        [&self.w_input, &self.w_hidden, &self.b_input, &self.b_hidden, &self.w_out, &self.b_out]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; Self::COUNT] {
        [
            &mut self.w_input,
            &mut self.w_hidden,
            &mut self.b_input,
            &mut self.b_hidden,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartForecaster {
    pub name: String,
    /// Latent dimensions read and predicted by this part.
    pub dims: Vec<usize>,
    pub hidden: usize,
    pub params: GruCellParams,
}

/// Hidden state of every part for a batch of rollouts.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub parts: Vec<Tensor>,
}

impl HiddenState {
    /// Total hidden width across parts.
    pub fn width(&self) -> usize {
        self.parts.iter().map(Tensor::cols).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pfm {
    parts: Vec<PartForecaster>,
    width: usize,
    sigma_floor: f64,
    /// Column order that undoes concatenating the parts' dims.
    restore: Vec<usize>,
}

/// Graph-side hidden state: one `batch × hidden` var per part.
#[derive(Clone, Debug)]
pub struct HiddenVars(pub Vec<Var>);

/// Graph-side Gaussian for a batch.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub std: Var,
}

impl Pfm {
    /// All-zero parameters. With part-aware prediction every body part of
    /// `topology` gets its own cell; otherwise one cell owns every dimension.
    pub fn new(topology: &SkeletonTopology, config: &PfmConfig) -> Self {
        let c = topology.channels;
        let groups: Vec<(String, Vec<usize>)> = if config.part_aware {
            topology
                .parts()
                .into_iter()
                .zip(topology.part_joints())
                .map(|(name, joints)| (name.to_string(), joints.iter().flat_map(|&j| j * c..(j + 1) * c).collect()))
                .collect()
        } else {
            vec![("all".to_string(), (0..topology.width()).collect())]
        };
        let parts: Vec<PartForecaster> = groups
            .into_iter()
            .map(|(name, dims)| PartForecaster {
                params: GruCellParams::zeros(dims.len(), config.hidden),
                name,
                dims,
                hidden: config.hidden,
            })
            .collect();
        let width = topology.width();
        let mut restore = vec![0; width];
        for (pos, &d) in parts.iter().flat_map(|p| &p.dims).enumerate() {
            restore[d] = pos;
        }
        Self { parts, width, sigma_floor: config.sigma_floor, restore }
    }

    /// Uniform `±1/√hidden` initialisation (the usual recurrent default).
    pub fn randomize(&mut self, rng: &mut impl Rng) {
        for part in &mut self.parts {
            let bound = 1.0 / (part.hidden as f64).sqrt();
            for t in part.params.tensors_mut() {
                for v in t.data_mut() {
                    *v = rng.random_range(-bound..=bound);
                }
            }
        }
    }

    pub fn parts(&self) -> &[PartForecaster] {
        &self.parts
    }

    pub fn parts_mut(&mut self) -> &mut [PartForecaster] {
        &mut self.parts
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn sigma_floor(&self) -> f64 {
        self.sigma_floor
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.parts.iter().flat_map(|p| p.params.tensors())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.parts.iter_mut().flat_map(|p| p.params.tensors_mut())
    }

    pub fn num_params(&self) -> usize {
        self.parts.len() * GruCellParams::COUNT
    }

    /// Zero hidden state for `batch` rollouts.
    pub fn init_state(&self, batch: usize) -> HiddenState {
        HiddenState { parts: self.parts.iter().map(|p| Tensor::zeros(batch, p.hidden)).collect() }
    }

    pub fn bind_state(&self, g: &mut Graph, state: &HiddenState) -> HiddenVars {
        HiddenVars(state.parts.iter().map(|t| g.input(t.clone())).collect())
    }

    pub fn read_state(&self, g: &Graph, vars: &HiddenVars) -> HiddenState {
        HiddenState { parts: vars.0.iter().map(|&v| g.value(v).clone()).collect() }
    }

    /// One GRU update per part. `latent` is `batch × width`; `params` are the
    /// bound parameters in [`params`](Self::params) order.
    pub fn step_graph(&self, g: &mut Graph, params: &[Var], latent: Var, hidden: &HiddenVars) -> Result<HiddenVars, NumericsError> {
        let mut next = Vec::with_capacity(self.parts.len());
        for (k, part) in self.parts.iter().enumerate() {
            let p = &params[k * GruCellParams::COUNT..(k + 1) * GruCellParams::COUNT];
            let (w_i, w_h, b_i, b_h) = (p[0], p[1], p[2], p[3]);
            let h = hidden.0[k];
            let hs = part.hidden;
            let x = g.gather_cols(latent, &part.dims)?;
            let gi = g.matmul(x, w_i)?;
            let gi = g.add_row(gi, b_i)?;
            let gh = g.matmul(h, w_h)?;
            let gh = g.add_row(gh, b_h)?;

            let gi_r = g.slice_cols(gi, 0, hs)?;
            let gh_r = g.slice_cols(gh, 0, hs)?;
            let r = g.add(gi_r, gh_r)?;
            let r = g.sigmoid(r)?;

            let gi_u = g.slice_cols(gi, hs, 2 * hs)?;
            let gh_u = g.slice_cols(gh, hs, 2 * hs)?;
            let u = g.add(gi_u, gh_u)?;
            let u = g.sigmoid(u)?;

            let gi_n = g.slice_cols(gi, 2 * hs, 3 * hs)?;
            let gh_n = g.slice_cols(gh, 2 * hs, 3 * hs)?;
            let gated = g.mul(r, gh_n)?;
            let n = g.add(gi_n, gated)?;
            let n = g.tanh(n)?;

            // h' = n + u ⊙ (h − n)
            let diff = g.sub(h, n)?;
            let keep = g.mul(u, diff)?;
            next.push(g.add(n, keep)?);
        }
        Ok(HiddenVars(next))
    }

    /// Output heads: Gaussian over the next frame for every part, reassembled
    /// into latent order.
    pub fn emit_graph(&self, g: &mut Graph, params: &[Var], hidden: &HiddenVars) -> Result<GaussianVars, NumericsError> {
        let mut means = Vec::with_capacity(self.parts.len());
        let mut stds = Vec::with_capacity(self.parts.len());
        for (k, part) in self.parts.iter().enumerate() {
            let p = &params[k * GruCellParams::COUNT..(k + 1) * GruCellParams::COUNT];
            let d = part.dims.len();
            let o = g.matmul(hidden.0[k], p[4])?;
            let o = g.add_row(o, p[5])?;
            means.push(g.slice_cols(o, 0, d)?);
            let log_std = g.slice_cols(o, d, 2 * d)?;
            let std = g.exp(log_std)?;
            stds.push(g.clamp_min(std, self.sigma_floor)?);
        }
        let (mean, std) = if self.parts.len() == 1 {
            (means[0], stds[0])
        } else {
            let m = g.concat_cols(&means)?;
            let s = g.concat_cols(&stds)?;
            (g.gather_cols(m, &self.restore)?, g.gather_cols(s, &self.restore)?)
        };
        Ok(GaussianVars { mean, std })
    }

    fn bind_inputs(&self, g: &mut Graph) -> Vec<Var> {
        self.params().map(|p| g.input(p.clone())).collect()
    }

    fn check(&self, latent: &[f64]) -> Result<(), PfmError> {
        if latent.len() != self.width {
            return Err(PfmError::Shape { expected: self.width, found: latent.len() });
        }
        Ok(())
    }

    /// Steps a single rollout's hidden state through `history` latent frames.
    pub fn encode_history(&self, history: &[Vec<f64>]) -> Result<HiddenState, PfmError> {
        if history.is_empty() {
            return Err(PfmError::EmptyHistory);
        }
        let mut g = Graph::new();
        let params = self.bind_inputs(&mut g);
        let mut h = self.bind_state(&mut g, &self.init_state(1));
        for frame in history {
            self.check(frame)?;
            let x = g.input(Tensor::row_vector(frame.clone()));
            h = self.step_graph(&mut g, &params, x, &h)?;
        }
        Ok(self.read_state(&g, &h))
    }

    /// Gaussian implied by a hidden state without updating it.
    pub fn emit(&self, hidden: &HiddenState) -> Result<LatentGaussian, PfmError> {
        let mut g = Graph::new();
        let params = self.bind_inputs(&mut g);
        let h = self.bind_state(&mut g, hidden);
        let out = self.emit_graph(&mut g, &params, &h)?;
        Ok(LatentGaussian { mean: g.value(out.mean).row(0).to_vec(), std: g.value(out.std).row(0).to_vec() })
    }

    /// Consumes the previous frame's latent, advances the hidden state and
    /// returns the Gaussian for the following frame.
    pub fn predict_step(&self, prev_latent: &[f64], hidden: &HiddenState) -> Result<(LatentGaussian, HiddenState), PfmError> {
        self.check(prev_latent)?;
        let mut g = Graph::new();
        let params = self.bind_inputs(&mut g);
        let h = self.bind_state(&mut g, hidden);
        let x = g.input(Tensor::row_vector(prev_latent.to_vec()));
        let h = self.step_graph(&mut g, &params, x, &h)?;
        let out = self.emit_graph(&mut g, &params, &h)?;
        let gauss = LatentGaussian { mean: g.value(out.mean).row(0).to_vec(), std: g.value(out.std).row(0).to_vec() };
        Ok((gauss, self.read_state(&g, &h)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::ChannelSemantics;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn topology() -> SkeletonTopology {
        SkeletonTopology {
            joint_names: (0..4).map(|i| format!("j{i}")).collect(),
            parents: vec![-1, 0, 0, 2],
            channels: 2,
            semantics: ChannelSemantics::Expmap,
            part_labels: ["up", "up", "lo", "lo"].map(String::from).to_vec(),
        }
    }

    fn random_latent(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    fn small(part_aware: bool) -> Pfm {
        Pfm::new(&topology(), &PfmConfig { hidden: 6, part_aware, sigma_floor: DEFAULT_SIGMA_FLOOR })
    }

    #[test]
    fn init_state_is_zero_and_sized() {
        let pfm = small(true);
        let a = pfm.init_state(1);
        assert_eq!(a, pfm.init_state(1));
        assert_eq!(a.width(), 12);
        assert!(a.parts.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn zero_params_emit_head_bias() {
        let mut pfm = small(true);
        // mean bias 0.25 on the first dim of each part, log-std bias ln 2
        for part in pfm.parts_mut() {
            let d = part.dims.len();
            part.params.b_out.data_mut()[0] = 0.25;
            part.params.b_out.data_mut()[d..].iter_mut().for_each(|v| *v = 2f64.ln());
        }
        let (gauss, h) = pfm.predict_step(&[1.0; 8], &pfm.init_state(1)).unwrap();
        assert!(h.parts.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert_eq!(gauss.mean, vec![0.25, 0.0, 0.0, 0.0, 0.25, 0.0, 0.0, 0.0]);
        assert!(gauss.std.iter().all(|&s| (s - 2.0).abs() < 1e-15));
    }

    #[test]
    fn sigma_is_positive_and_floored() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut pfm = small(true);
        for _ in 0..200 {
            pfm.randomize(&mut rng);
            for v in pfm.params_mut().flat_map(|t| t.data_mut()) {
                *v *= 40.0;
            }
            let (gauss, _) = pfm.predict_step(&random_latent(&mut rng, 8), &pfm.init_state(1)).unwrap();
            assert!(gauss.std.iter().all(|&s| s >= DEFAULT_SIGMA_FLOOR));
        }
    }

    #[test]
    fn encode_single_frame_equals_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pfm = small(true);
        pfm.randomize(&mut rng);
        let z = random_latent(&mut rng, 8);
        let enc = pfm.encode_history(&[z.clone()]).unwrap();
        let (_, stepped) = pfm.predict_step(&z, &pfm.init_state(1)).unwrap();
        assert_eq!(enc, stepped);
        assert_eq!(pfm.encode_history(&[z.clone()]).unwrap(), enc);
        assert!(matches!(pfm.encode_history(&[]), Err(PfmError::EmptyHistory)));
    }

    #[test]
    fn history_order_matters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pfm = small(true);
        pfm.randomize(&mut rng);
        let frames: Vec<Vec<f64>> = (0..4).map(|_| random_latent(&mut rng, 8)).collect();
        let mut reversed = frames.clone();
        reversed.reverse();
        let a = pfm.encode_history(&frames).unwrap();
        let b = pfm.encode_history(&reversed).unwrap();
        let diff: f64 = a.parts.iter().zip(&b.parts).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn parts_are_isolated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pfm = small(true);
        pfm.randomize(&mut rng);
        let parts: Vec<Vec<usize>> = pfm.parts().iter().map(|p| p.dims.clone()).collect();
        for (a, b) in [(0, 1), (1, 0)] {
            let z = random_latent(&mut rng, 8);
            let mut perturbed = z.clone();
            for &d in &parts[b] {
                perturbed[d] += rng.random_range(0.5..1.5);
            }
            let history = pfm.encode_history(&[random_latent(&mut rng, 8)]).unwrap();
            let (base, _) = pfm.predict_step(&z, &history).unwrap();
            let (moved, _) = pfm.predict_step(&perturbed, &history).unwrap();
            for &d in &parts[a] {
                assert_eq!(base.mean[d].to_bits(), moved.mean[d].to_bits());
                assert_eq!(base.std[d].to_bits(), moved.std[d].to_bits());
            }
            assert!(parts[b].iter().any(|&d| base.mean[d] != moved.mean[d]));
        }
    }

    #[test]
    fn single_forecaster_owns_every_dim() {
        let pfm = small(false);
        assert_eq!(pfm.parts().len(), 1);
        assert_eq!(pfm.parts()[0].dims, (0..8).collect::<Vec<_>>());
        assert_eq!(pfm.num_params(), GruCellParams::COUNT);
    }

    #[test]
    fn wrong_width_is_rejected() {
        let pfm = small(true);
        assert!(matches!(pfm.predict_step(&[0.0; 3], &pfm.init_state(1)), Err(PfmError::Shape { .. })));
    }
}
