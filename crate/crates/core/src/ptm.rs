//! Pose transformation module: an invertible map from flattened poses to
//! latent codes built from part-aware additive coupling layers and an
//! optional diagonal scaling layer.
//!
//! A coupling layer leaves the passive joints `I1` untouched and shifts the
//! active joints `I2` by `A · H_I1 · W`, where `A` aggregates skeletal
//! neighbours across the split and `W` mixes channels. The shift depends only
//! on passive rows, so the inverse subtracts the same quantity. Additive
//! coupling has unit Jacobian; only the scaling layer changes volume.
//!
//! Everything operates on batches: `N × (J·C)` matrices, one frame per row.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Graph, NumericsError, Tensor, Var};
use crate::skeleton::{build_cross_adjacency, default_partitions, scheduled_partition, PartPartition, SkeletonTopology};

#[derive(Debug, Error)]
pub enum PtmError {
    #[error("pose batch has width {found}, expected {expected}")]
    Shape { expected: usize, found: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// How the coupling shift is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CouplingKind {
    /// Skeleton-graph coupling over body-part partitions.
    #[default]
    Gcn,
    /// Plain channel-split coupling with a dense weight (no skeleton prior).
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PtmConfig {
    pub layers: usize,
    pub coupling: CouplingKind,
    pub scaling_layer: bool,
    /// Apply `tanh` to the coupling shift.
    pub shift_tanh: bool,
}

impl Default for PtmConfig {
    fn default() -> Self {
        Self { layers: 8, coupling: CouplingKind::Gcn, scaling_layer: true, shift_tanh: false }
    }
}

/// Fixed (non-trainable) structure of one coupling layer.
#[derive(Clone, Debug, PartialEq)]
enum CouplingStructure {
    Gcn {
        partition: PartPartition,
        adjacency: Tensor,
        /// `kron(Aᵀ, I_C)`: maps flattened passive joints to aggregated
        /// per-active-joint features.
        mixer: Tensor,
        channels: usize,
    },
    Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingLayer {
    structure: CouplingStructure,
    /// Flattened column indices of the passive and active sets.
    passive: Vec<usize>,
    active: Vec<usize>,
    /// Inverse of the `passive ++ active` column permutation.
    restore: Vec<usize>,
    /// `C × C` for graph coupling, `|passive| × |active|` for dense coupling.
    pub weight: Tensor,
    pub shift_tanh: bool,
}

fn joint_columns(joints: &[usize], channels: usize) -> Vec<usize> {
    joints.iter().flat_map(|&j| (j * channels)..(j + 1) * channels).collect()
}

fn restore_order(passive: &[usize], active: &[usize]) -> Vec<usize> {
    let mut restore = vec![0; passive.len() + active.len()];
    for (pos, &col) in passive.iter().chain(active).enumerate() {
        restore[col] = pos;
    }
    restore
}

impl CouplingLayer {
    /// Graph coupling for one partition, with `W = 0` (identity map).
    pub fn gcn(topology: &SkeletonTopology, partition: PartPartition) -> Self {
        let c = topology.channels;
        let adjacency = build_cross_adjacency(topology, &partition);
        let (n2, n1) = (adjacency.rows(), adjacency.cols());
        let mut mixer = Tensor::zeros(n1 * c, n2 * c);
        for i in 0..n2 {
            for j in 0..n1 {
                for ch in 0..c {
                    mixer.set(j * c + ch, i * c + ch, adjacency.get(i, j));
                }
            }
        }
        let passive = joint_columns(partition.first(), c);
        let active = joint_columns(partition.second(), c);
        Self {
            restore: restore_order(&passive, &active),
            passive,
            active,
            structure: CouplingStructure::Gcn { partition, adjacency, mixer, channels: c },
            weight: Tensor::zeros(c, c),
            shift_tanh: false,
        }
    }

    /// Dense coupling on an even/odd (or odd/even) split of the flat vector.
    pub fn dense(width: usize, odd_passive: bool) -> Self {
        let (even, odd): (Vec<usize>, Vec<usize>) = (0..width).partition(|c| c % 2 == 0);
        let (passive, active) = if odd_passive { (odd, even) } else { (even, odd) };
        Self {
            restore: restore_order(&passive, &active),
            weight: Tensor::zeros(passive.len(), active.len()),
            passive,
            active,
            structure: CouplingStructure::Dense,
            shift_tanh: false,
        }
    }

    pub fn width(&self) -> usize {
        self.restore.len()
    }

    pub fn partition(&self) -> Option<&PartPartition> {
        match &self.structure {
            CouplingStructure::Gcn { partition, .. } => Some(partition),
            CouplingStructure::Dense => None,
        }
    }

    pub fn adjacency(&self) -> Option<&Tensor> {
        match &self.structure {
            CouplingStructure::Gcn { adjacency, .. } => Some(adjacency),
            CouplingStructure::Dense => None,
        }
    }

    fn shift(&self, g: &mut Graph, passive: Var, weight: Var) -> Result<Var, NumericsError> {
        let rows = g.shape(passive).0;
        let shift = match &self.structure {
            CouplingStructure::Gcn { mixer, channels, .. } => {
                let m = g.input(mixer.clone());
                let agg = g.matmul(passive, m)?;
                let per_joint = g.reshape(agg, rows * self.active.len() / channels, *channels)?;
                let mixed = g.matmul(per_joint, weight)?;
                g.reshape(mixed, rows, self.active.len())?
            }
            CouplingStructure::Dense => g.matmul(passive, weight)?,
        };
        if self.shift_tanh {
            g.tanh(shift)
        } else {
            Ok(shift)
        }
    }

    fn apply(&self, g: &mut Graph, h: Var, weight: Var, sign: f64) -> Result<Var, NumericsError> {
        let passive = g.gather_cols(h, &self.passive)?;
        let active = g.gather_cols(h, &self.active)?;
        let shift = self.shift(g, passive, weight)?;
        let moved = if sign > 0.0 { g.add(active, shift)? } else { g.sub(active, shift)? };
        let joined = g.concat_cols(&[passive, moved])?;
        g.gather_cols(joined, &self.restore)
    }

    pub fn forward_graph(&self, g: &mut Graph, h: Var, weight: Var) -> Result<Var, NumericsError> {
        self.apply(g, h, weight, 1.0)
    }

    pub fn inverse_graph(&self, g: &mut Graph, h: Var, weight: Var) -> Result<Var, NumericsError> {
        self.apply(g, h, weight, -1.0)
    }
}

fn check_width(t: &Tensor, expected: usize) -> Result<(), PtmError> {
    if t.cols() != expected {
        return Err(PtmError::Shape { expected, found: t.cols() });
    }
    Ok(())
}

fn run(t: &Tensor, f: impl FnOnce(&mut Graph, Var) -> Result<Var, NumericsError>) -> Result<Tensor, PtmError> {
    let mut g = Graph::new();
    let x = g.input(Tensor::matrix(t.rows(), t.cols(), t.data().to_vec()));
    let y = f(&mut g, x)?;
    Ok(g.value(y).clone())
}

/// Shifts the active rows of one pose batch.
pub fn coupling_forward(layer: &CouplingLayer, h: &Tensor) -> Result<Tensor, PtmError> {
    check_width(h, layer.width())?;
    run(h, |g, x| {
        let w = g.input(layer.weight.clone());
        layer.forward_graph(g, x, w)
    })
}

/// Exact inverse of [`coupling_forward`].
pub fn coupling_inverse(layer: &CouplingLayer, h: &Tensor) -> Result<Tensor, PtmError> {
    check_width(h, layer.width())?;
    run(h, |g, x| {
        let w = g.input(layer.weight.clone());
        layer.inverse_graph(g, x, w)
    })
}

/// Elementwise `z = x · exp(s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingLayer {
    /// `1 × (J·C)` log scales.
    pub log_scales: Tensor,
}

impl ScalingLayer {
    pub fn identity(width: usize) -> Self {
        Self { log_scales: Tensor::zeros(1, width) }
    }

    pub fn log_det(&self) -> f64 {
        self.log_scales.data().iter().sum()
    }

    pub fn forward_graph(&self, g: &mut Graph, h: Var, s: Var) -> Result<Var, NumericsError> {
        let scale = g.exp(s)?;
        g.mul_row(h, scale)
    }

    pub fn inverse_graph(&self, g: &mut Graph, h: Var, s: Var) -> Result<Var, NumericsError> {
        let neg = g.neg(s)?;
        let scale = g.exp(neg)?;
        g.mul_row(h, scale)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PtmLayer {
    Coupling(CouplingLayer),
    Scaling(ScalingLayer),
}

impl PtmLayer {
    pub fn param(&self) -> &Tensor {
        match self {
            PtmLayer::Coupling(c) => &c.weight,
            PtmLayer::Scaling(s) => &s.log_scales,
        }
    }

    pub fn param_mut(&mut self) -> &mut Tensor {
        match self {
            PtmLayer::Coupling(c) => &mut c.weight,
            PtmLayer::Scaling(s) => &mut s.log_scales,
        }
    }
}

/// Ordered invertible layers, applied first to last in the pose→latent
/// direction. Each layer owns exactly one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct PtmStack {
    layers: Vec<PtmLayer>,
    width: usize,
}

impl PtmStack {
    /// Stack with every coupling weight zero and unit scales: the identity.
    pub fn new(topology: &SkeletonTopology, config: &PtmConfig) -> Self {
        let width = topology.width();
        let bases = default_partitions(topology);
        let mut layers: Vec<PtmLayer> = (0..config.layers)
            .map(|l| {
                let mut layer = match config.coupling {
                    CouplingKind::Gcn => CouplingLayer::gcn(topology, scheduled_partition(&bases, l)),
                    CouplingKind::Dense => CouplingLayer::dense(width, l % 2 == 1),
                };
                layer.shift_tanh = config.shift_tanh;
                PtmLayer::Coupling(layer)
            })
            .collect();
        if config.scaling_layer {
            layers.push(PtmLayer::Scaling(ScalingLayer::identity(width)));
        }
        Self { layers, width }
    }

    pub fn from_layers(layers: Vec<PtmLayer>, width: usize) -> Self {
        Self { layers, width }
    }

    /// Fills every parameter with uniform values in `[-amplitude, amplitude]`.
    pub fn randomize(&mut self, rng: &mut impl Rng, amplitude: f64) {
        for layer in &mut self.layers {
            for v in layer.param_mut().data_mut() {
                *v = rng.random_range(-amplitude..=amplitude);
            }
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn layers(&self) -> &[PtmLayer] {
        &self.layers
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().map(PtmLayer::param)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().map(PtmLayer::param_mut)
    }

    pub fn num_params(&self) -> usize {
        self.layers.len()
    }

    /// `f(x)` for a batch; `params` are the bound layer parameters in order.
    pub fn forward_graph(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var, NumericsError> {
        self.layers.iter().zip(params).try_fold(x, |h, (layer, &p)| match layer {
            PtmLayer::Coupling(c) => c.forward_graph(g, h, p),
            PtmLayer::Scaling(s) => s.forward_graph(g, h, p),
        })
    }

    /// `f⁻¹(z)` for a batch.
    pub fn inverse_graph(&self, g: &mut Graph, params: &[Var], z: Var) -> Result<Var, NumericsError> {
        self.layers.iter().zip(params).rev().try_fold(z, |h, (layer, &p)| match layer {
            PtmLayer::Coupling(c) => c.inverse_graph(g, h, p),
            PtmLayer::Scaling(s) => s.inverse_graph(g, h, p),
        })
    }

    /// `log |det ∂f/∂x|` as a graph scalar (0 for coupling-only stacks).
    pub fn log_det_graph(&self, g: &mut Graph, params: &[Var]) -> Result<Var, NumericsError> {
        let mut terms = Vec::new();
        for (layer, &p) in self.layers.iter().zip(params) {
            if let PtmLayer::Scaling(_) = layer {
                terms.push(g.sum(p)?);
            }
        }
        let Some((&first, rest)) = terms.split_first() else {
            return Ok(g.constant(0.0));
        };
        rest.iter().try_fold(first, |acc, &t| g.add(acc, t))
    }

    fn bind_inputs(&self, g: &mut Graph) -> Vec<Var> {
        self.params().map(|p| g.input(p.clone())).collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, PtmError> {
        check_width(x, self.width)?;
        run(x, |g, v| {
            let p = self.bind_inputs(g);
            self.forward_graph(g, &p, v)
        })
    }

    pub fn inverse(&self, z: &Tensor) -> Result<Tensor, PtmError> {
        check_width(z, self.width)?;
        run(z, |g, v| {
            let p = self.bind_inputs(g);
            self.inverse_graph(g, &p, v)
        })
    }

    /// Sum of all scaling-layer log scales; independent of the input.
    pub fn log_det(&self) -> f64 {
        self.layers
            .iter()
            .filter_map(|l| match l {
                PtmLayer::Scaling(s) => Some(s.log_det()),
                PtmLayer::Coupling(_) => None,
            })
            .sum()
    }

    /// Exact `log p(x)` per row under a standard-normal base density.
    pub fn log_density(&self, x: &Tensor) -> Result<Vec<f64>, PtmError> {
        let z = self.forward(x)?;
        let ld = self.log_det();
        Ok((0..z.rows()).map(|r| latent_log_likelihood(z.row(r)) + ld).collect())
    }
}

/// `Σ_i [−½ ln 2π − z_i²/2]`.
pub fn latent_log_likelihood(z: &[f64]) -> f64 {
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    z.iter().map(|v| -half_ln_2pi - 0.5 * v * v).sum()
}

/// Graph form of [`latent_log_likelihood`] summed over all rows.
pub fn latent_log_likelihood_graph(g: &mut Graph, z: Var) -> Result<Var, NumericsError> {
    let n = g.value(z).len() as f64;
    let sq = g.square(z)?;
    let s = g.sum(sq)?;
    let half = g.scale(s, -0.5)?;
    g.shift(half, -0.5 * (2.0 * std::f64::consts::PI).ln() * n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::ChannelSemantics;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain_pair() -> SkeletonTopology {
        SkeletonTopology {
            joint_names: (0..8).map(|i| format!("j{i}")).collect(),
            parents: vec![-1, 0, 1, 2, 0, 4, 5, 6],
            channels: 3,
            semantics: ChannelSemantics::Expmap,
            part_labels: ["a", "a", "a", "a", "b", "b", "b", "b"].map(String::from).to_vec(),
        }
    }

    fn random_poses(n: usize, width: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(n, width, (0..n * width).map(|_| rng.random_range(-3.0..3.0)).collect())
    }

    #[test]
    fn zero_weight_coupling_is_identity() {
        let t = chain_pair();
        let layer = CouplingLayer::gcn(&t, default_partitions(&t)[0].clone());
        let x = random_poses(4, 24, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(coupling_forward(&layer, &x).unwrap(), x);
        assert_eq!(coupling_inverse(&layer, &x).unwrap(), x);
    }

    #[test]
    fn worked_coupling_example() {
        // 3-joint chain 0-1-2 with two channels; I1 = {0, 2}, I2 = {1}.
        let t = SkeletonTopology {
            joint_names: vec!["a".into(), "b".into(), "c".into()],
            parents: vec![-1, 0, 1],
            channels: 2,
            semantics: ChannelSemantics::Cartesian,
            part_labels: vec!["x".into(), "y".into(), "x".into()],
        };
        let mut layer = CouplingLayer::gcn(&t, PartPartition::new(vec![0, 2], vec![1], 3).unwrap());
        assert_eq!(layer.adjacency().unwrap().data(), &[0.5, 0.5]);
        layer.weight = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        // joint rows: H_I1 = [[1,0],[0,1]] at joints 0 and 2, H_I2 = [[1,1]] at joint 1
        let h = Tensor::matrix(1, 6, vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        let out = coupling_forward(&layer, &h).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0, 1.5, 1.5, 0.0, 1.0]);
        let back = coupling_inverse(&layer, &out).unwrap();
        assert_eq!(back.data(), h.data());
    }

    #[test]
    fn coupling_round_trip_on_many_poses() {
        let t = chain_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (i, p) in default_partitions(&t).into_iter().enumerate() {
            let mut layer = CouplingLayer::gcn(&t, p);
            layer.shift_tanh = i == 1;
            layer.weight = random_poses(3, 3, &mut rng);
            let x = random_poses(1000, 24, &mut rng);
            let y = coupling_forward(&layer, &x).unwrap();
            assert!(coupling_inverse(&layer, &y).unwrap().max_abs_diff(&x) < 1e-12);
        }
    }

    #[test]
    fn passive_rows_are_unchanged() {
        let t = chain_pair();
        let p = default_partitions(&t)[1].clone();
        let mut layer = CouplingLayer::gcn(&t, p.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        layer.weight = random_poses(3, 3, &mut rng);
        let x = random_poses(5, 24, &mut rng);
        let y = coupling_forward(&layer, &x).unwrap();
        for r in 0..5 {
            for &j in p.first() {
                for c in 0..3 {
                    assert_eq!(y.get(r, j * 3 + c), x.get(r, j * 3 + c));
                }
            }
        }
        assert!(y.max_abs_diff(&x) > 0.0);
    }

    #[test]
    fn wrong_width_is_rejected() {
        let t = chain_pair();
        let stack = PtmStack::new(&t, &PtmConfig::default());
        assert!(matches!(stack.forward(&Tensor::zeros(2, 5)), Err(PtmError::Shape { expected: 24, found: 5 })));
    }

    #[test]
    fn identity_stack_maps_x_to_itself() {
        let t = chain_pair();
        for coupling in [CouplingKind::Gcn, CouplingKind::Dense] {
            let stack = PtmStack::new(&t, &PtmConfig { coupling, ..Default::default() });
            let x = random_poses(7, 24, &mut ChaCha8Rng::seed_from_u64(2));
            assert_eq!(stack.forward(&x).unwrap(), x);
        }
    }

    #[test]
    fn random_stack_round_trip_and_frame_independence() {
        let t = chain_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for coupling in [CouplingKind::Gcn, CouplingKind::Dense] {
            let mut stack = PtmStack::new(&t, &PtmConfig { coupling, shift_tanh: true, ..Default::default() });
            stack.randomize(&mut rng, 0.5);
            let x = random_poses(50, 24, &mut rng);
            let z = stack.forward(&x).unwrap();
            assert!(stack.inverse(&z).unwrap().max_abs_diff(&x) < 1e-9);
            // frame-wise: mapping one row alone gives the same row
            let single = Tensor::row_vector(x.row(17).to_vec());
            assert_eq!(stack.forward(&single).unwrap().data(), z.row(17));
        }
    }

    #[test]
    fn log_det_sums_scaling_layers_only() {
        let t = chain_pair();
        let coupling_only = PtmStack::new(&t, &PtmConfig { scaling_layer: false, ..Default::default() });
        assert_eq!(coupling_only.log_det(), 0.0);

        let ln2 = std::f64::consts::LN_2;
        let mut scale = ScalingLayer::identity(2);
        scale.log_scales = Tensor::row_vector(vec![ln2, 0.0]);
        assert_eq!(PtmStack::from_layers(vec![PtmLayer::Scaling(scale)], 2).log_det(), ln2);

        let mut sym = ScalingLayer::identity(2);
        sym.log_scales = Tensor::row_vector(vec![0.1, -0.1]);
        assert_eq!(PtmStack::from_layers(vec![PtmLayer::Scaling(sym)], 2).log_det(), 0.0);
    }

    #[test]
    fn latent_log_likelihood_closed_form() {
        let two_pi_ln = (2.0 * std::f64::consts::PI).ln();
        assert!((latent_log_likelihood(&[0.0, 0.0]) + 1.8378770664093453).abs() < 1e-15);
        for d in 1..6 {
            let v = latent_log_likelihood(&vec![0.0; d]);
            assert!((v + d as f64 / 2.0 * two_pi_ln).abs() < 1e-12);
        }
        let mut last = latent_log_likelihood(&[0.0, 0.0, 0.0]);
        for k in 1..20 {
            let r = k as f64 * 0.3;
            let v = latent_log_likelihood(&[r * 0.6, -r * 0.8, 0.0]);
            assert!(v < last);
            last = v;
        }
    }
}
