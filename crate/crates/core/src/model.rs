//! The full network: species/distance embedding into per-atom stacks of 3x3
//! tensor channels, message-passing interaction layers built on the
//! commutator-free matrix product, and output heads for energy, dipole,
//! polarizability, and nuclear shielding.
//!
//! Every forward pass is recorded on a [`Tape`], so forces are one
//! `backward` call away and force-fitting losses can differentiate through
//! that backward again. All aggregation runs in a fixed order, making
//! evaluation bit-deterministic for a given input ordering.

use crate::geometry::{
    build_edges, element_symbol, AtomicSystem, GeometryError, RadialBasis,
};
use crate::nn::{
    self, init_bias_uniform, init_fan_in_uniform, init_standard_normal, init_xavier_uniform,
    linear, mlp, LAYER_NORM_EPS,
};
use crate::params::{ParamError, ParamStore, StagedParams};
use crate::tape::{Tape, TensorData, ValueId};
use crate::Real;
use rand::rngs::StdRng;
use rand::SeedableRng;
use thiserror::Error;

/// Symmetry group the interaction product respects. `O3` uses the
/// anticommutator `YM + MY`, which keeps reflections intact; `SO3` uses
/// `2·YM`, which is rotation-equivariant only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EquivarianceGroup {
    O3,
    SO3,
}

impl EquivarianceGroup {
    pub fn name(self) -> &'static str {
        match self {
            EquivarianceGroup::O3 => "O3",
            EquivarianceGroup::SO3 => "SO3",
        }
    }
}

/// Output heads a model can serve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Head {
    EnergyForces,
    Dipole,
    Polarizability,
    Shielding,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::EnergyForces => "energy_forces",
            Head::Dipole => "dipole",
            Head::Polarizability => "polarizability",
            Head::Shielding => "shielding",
        }
    }

    pub const ALL: [Head; 4] =
        [Head::EnergyForces, Head::Dipole, Head::Polarizability, Head::Shielding];
}

/// Default per-element weights for the shielding head, chosen to balance the
/// very different magnitudes of C, O, and H shielding tensors.
pub const DEFAULT_ELEMENT_WEIGHTS: [(u32, Real); 3] =
    [(1, 1.0), (6, 1.0 / 0.167), (8, 1.0 / 0.022)];

/// Architecture and output configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Tensor channels per atom (`C`). Must be even (head chains halve it).
    pub n_channels: usize,
    /// Radial basis functions per edge (`d`).
    pub n_rbf: usize,
    /// Neighbor cutoff in Angstrom.
    pub cutoff: Real,
    /// Interaction layers (`L`); 0 means embedding + heads only.
    pub n_interaction_layers: usize,
    pub equivariance_group: EquivarianceGroup,
    /// Largest atomic number the species table covers.
    pub max_atomic_number: u32,
    pub enabled_heads: Vec<Head>,
    /// Scale applied to each atomic energy contribution.
    pub energy_scale: Real,
    /// Flat per-atom shift, used when `atomic_ref_energies` is absent.
    pub energy_shift: Real,
    /// Per-element reference energies `(z, E_ref)`; when set, each atom is
    /// shifted by its element's reference instead of `energy_shift`.
    pub atomic_ref_energies: Option<Vec<(u32, Real)>>,
    /// Per-element weights `(z, w)` for the shielding head.
    pub element_weights: Vec<(u32, Real)>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_channels: 128,
            n_rbf: 32,
            cutoff: 4.5,
            n_interaction_layers: 2,
            equivariance_group: EquivarianceGroup::O3,
            max_atomic_number: 118,
            enabled_heads: vec![Head::EnergyForces],
            energy_scale: 1.0,
            energy_shift: 0.0,
            atomic_ref_energies: None,
            element_weights: DEFAULT_ELEMENT_WEIGHTS.to_vec(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: String| Err(ModelError::InvalidConfig { reason });
        if self.n_channels < 2 || self.n_channels % 2 != 0 {
            return fail(format!("n_channels must be even and >= 2, got {}", self.n_channels));
        }
        if self.n_rbf < 2 {
            return fail(format!("n_rbf must be >= 2, got {}", self.n_rbf));
        }
        if !(self.cutoff > 0.0) || !self.cutoff.is_finite() {
            return fail(format!("cutoff must be positive and finite, got {}", self.cutoff));
        }
        if self.max_atomic_number < 1 || self.max_atomic_number > 118 {
            return fail(format!(
                "max_atomic_number must be in 1..=118, got {}",
                self.max_atomic_number
            ));
        }
        if self.enabled_heads.is_empty() {
            return fail("enabled_heads must not be empty".into());
        }
        for (k, h) in self.enabled_heads.iter().enumerate() {
            if self.enabled_heads[..k].contains(h) {
                return fail(format!("duplicate head {}", h.name()));
            }
        }
        if !self.energy_scale.is_finite() || !self.energy_shift.is_finite() {
            return fail("energy scale/shift must be finite".into());
        }
        if let Some(refs) = &self.atomic_ref_energies {
            for &(z, e) in refs {
                if z < 1 || z > self.max_atomic_number || !e.is_finite() {
                    return fail(format!("bad reference energy entry ({z}, {e})"));
                }
            }
        }
        for &(z, w) in &self.element_weights {
            if z < 1 || z > 118 || !(w > 0.0) || !w.is_finite() {
                return fail(format!("element weight ({z}, {w}) must be positive"));
            }
        }
        Ok(())
    }

    pub fn head_enabled(&self, head: Head) -> bool {
        self.enabled_heads.contains(&head)
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {reason}")]
    InvalidConfig { reason: String },
    #[error("atomic number {z} ({symbol}) exceeds the species table range 1..={max}")]
    AtomicNumberOutOfRange { z: u32, symbol: &'static str, max: u32 },
    #[error("head {} is not enabled in this model", .0.name())]
    HeadNotEnabled(Head),
    #[error("no shielding weight configured for element {symbol} (z={z})")]
    MissingElementWeight { z: u32, symbol: &'static str },
    #[error("no reference energy configured for element {symbol} (z={z})")]
    MissingReferenceEnergy { z: u32, symbol: &'static str },
    #[error("non-finite state after {stage}, channel {channel}")]
    NonFiniteState { stage: String, channel: usize },
    #[error("cannot run a forward pass on an empty batch")]
    EmptyBatch,
    #[error("missing parameter array {0}")]
    MissingParam(String),
    #[error("parameter {name} has shape {got:?}, expected {want:?}")]
    ParamShape { name: String, got: Vec<usize>, want: Vec<usize> },
    #[error("unexpected parameter array {0}")]
    UnexpectedParam(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

// ---- parameter layout ----

enum Init {
    /// Standard normal; species table rows.
    Table,
    /// `±sqrt(1/fan_in)` uniform over a `[out, in]` weight.
    Weight,
    /// `±sqrt(1/fan_in)` uniform over a bias.
    Bias { fan_in: usize },
    /// Xavier uniform over a `[out, in]` weight (final scalar layers).
    Xavier,
    Const(Real),
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn spec(name: String, shape: Vec<usize>, init: Init) -> ParamSpec {
    ParamSpec { name, shape, init }
}

fn push_linear(out: &mut Vec<ParamSpec>, name: &str, rows: usize, cols: usize) {
    out.push(spec(format!("{name}.w"), vec![rows, cols], Init::Weight));
    out.push(spec(format!("{name}.b"), vec![rows], Init::Bias { fan_in: cols }));
}

fn push_mix(out: &mut Vec<ParamSpec>, name: &str, c: usize) {
    out.push(spec(format!("{name}.w"), vec![c, c], Init::Weight));
}

/// Bias-free matrix/vector reduction pair: C -> C/2 -> 1.
fn push_chain(out: &mut Vec<ParamSpec>, name: &str, c: usize) {
    out.push(spec(format!("{name}0.w"), vec![c / 2, c], Init::Weight));
    out.push(spec(format!("{name}1.w"), vec![1, c / 2], Init::Weight));
}

/// Two-layer gate network: C invariants -> C/2 -> `outputs` scalars.
fn push_gate(out: &mut Vec<ParamSpec>, name: &str, c: usize, outputs: usize) {
    out.push(spec(format!("{name}0.w"), vec![c / 2, c], Init::Weight));
    out.push(spec(format!("{name}0.b"), vec![c / 2], Init::Bias { fan_in: c }));
    out.push(spec(format!("{name}1.w"), vec![outputs, c / 2], Init::Weight));
    out.push(spec(format!("{name}1.b"), vec![outputs], Init::Bias { fan_in: c / 2 }));
}

/// Every array the model owns, in creation (= RNG consumption) order.
fn parameter_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let c = cfg.n_channels;
    let d = cfg.n_rbf;
    let mut out = Vec::new();
    let z_rows = cfg.max_atomic_number as usize + 1;
    out.push(spec("embed.z_table".into(), vec![z_rows, c], Init::Table));
    push_linear(&mut out, "embed.pair", c, 2 * c);
    push_linear(&mut out, "embed.radial_iso", c, d);
    push_linear(&mut out, "embed.radial_anti", c, d);
    push_linear(&mut out, "embed.radial_sym", c, d);
    out.push(spec("embed.norm.gamma".into(), vec![c], Init::Const(1.0)));
    out.push(spec("embed.norm.beta".into(), vec![c], Init::Const(0.0)));
    push_linear(&mut out, "embed.mlp0", 2 * c, c);
    push_linear(&mut out, "embed.mlp1", 3 * c, 2 * c);
    push_mix(&mut out, "embed.mix_iso", c);
    push_mix(&mut out, "embed.mix_anti", c);
    push_mix(&mut out, "embed.mix_sym", c);
    for l in 0..cfg.n_interaction_layers {
        push_mix(&mut out, &format!("layer{l}.pre_iso"), c);
        push_mix(&mut out, &format!("layer{l}.pre_anti"), c);
        push_mix(&mut out, &format!("layer{l}.pre_sym"), c);
        push_linear(&mut out, &format!("layer{l}.mlp0"), c, d);
        push_linear(&mut out, &format!("layer{l}.mlp1"), 2 * c, c);
        push_linear(&mut out, &format!("layer{l}.mlp2"), 3 * c, 2 * c);
        push_mix(&mut out, &format!("layer{l}.post_iso"), c);
        push_mix(&mut out, &format!("layer{l}.post_anti"), c);
        push_mix(&mut out, &format!("layer{l}.post_sym"), c);
    }
    out.push(spec("energy.norm.gamma".into(), vec![3 * c], Init::Const(1.0)));
    out.push(spec("energy.norm.beta".into(), vec![3 * c], Init::Const(0.0)));
    push_linear(&mut out, "energy.mlp0", c, 3 * c);
    // Final two scalar layers: Xavier weights with vanishing biases.
    out.push(spec("energy.mlp1.w".into(), vec![c / 2, c], Init::Xavier));
    out.push(spec("energy.mlp1.b".into(), vec![c / 2], Init::Const(0.0)));
    out.push(spec("energy.mlp2.w".into(), vec![1, c / 2], Init::Xavier));
    out.push(spec("energy.mlp2.b".into(), vec![1], Init::Const(0.0)));
    if cfg.head_enabled(Head::Dipole) {
        push_chain(&mut out, "dipole.chain", c);
        push_gate(&mut out, "dipole.gate", c, 1);
    }
    if cfg.head_enabled(Head::Polarizability) {
        push_chain(&mut out, "polar.iso", c);
        push_chain(&mut out, "polar.sym", c);
        push_gate(&mut out, "polar.gate", c, 2);
    }
    if cfg.head_enabled(Head::Shielding) {
        out.push(spec("shield.pv_a.w".into(), vec![c, c], Init::Weight));
        out.push(spec("shield.pv_b.w".into(), vec![c, c], Init::Weight));
        push_chain(&mut out, "shield.iso", c);
        push_chain(&mut out, "shield.pv", c);
        push_chain(&mut out, "shield.sym", c);
        push_gate(&mut out, "shield.gate", c, 3);
    }
    out
}

// ---- model ----

/// Configuration plus the parameter arrays it defines.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Build a model with freshly initialized parameters. The same seed and
    /// config always produce bit-identical parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = StdRng::seed_from_u64(seed);
        let mut params = ParamStore::new(seed);
        for spec in parameter_layout(&config) {
            let numel: usize = spec.shape.iter().product();
            let values = match spec.init {
                Init::Table => init_standard_normal(&mut rng, numel),
                Init::Weight => init_fan_in_uniform(&mut rng, spec.shape[0], spec.shape[1]),
                Init::Bias { fan_in } => init_bias_uniform(&mut rng, spec.shape[0], fan_in),
                Init::Xavier => init_xavier_uniform(&mut rng, spec.shape[0], spec.shape[1]),
                Init::Const(v) => vec![v; numel],
            };
            params.add(&spec.name, spec.shape, values)?;
        }
        Ok(Self { config, params })
    }

    /// Rebuild a model around existing parameters (e.g. from a checkpoint),
    /// verifying that they exactly cover the layout the config demands.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = parameter_layout(&config);
        for spec in &layout {
            match params.get(&spec.name) {
                None => return Err(ModelError::MissingParam(spec.name.clone())),
                Some(entry) if entry.shape != spec.shape => {
                    return Err(ModelError::ParamShape {
                        name: spec.name.clone(),
                        got: entry.shape.clone(),
                        want: spec.shape.clone(),
                    })
                }
                Some(_) => {}
            }
        }
        for entry in params.entries() {
            if !layout.iter().any(|s| s.name == entry.name) {
                return Err(ModelError::UnexpectedParam(entry.name.clone()));
            }
        }
        Ok(Self { config, params })
    }

    /// Record the forward pass for a batch of systems on a fresh tape.
    /// `extra_heads` selects which non-energy outputs to build; each must be
    /// enabled in the config. Energy is always produced.
    pub fn forward_batch(
        &self,
        systems: &[AtomicSystem],
        extra_heads: &[Head],
    ) -> Result<ForwardPass, ModelError> {
        for head in extra_heads {
            if *head != Head::EnergyForces && !self.config.head_enabled(*head) {
                return Err(ModelError::HeadNotEnabled(*head));
            }
        }
        let batch = self.assemble(systems)?;
        self.record(batch, extra_heads)
    }

    /// Total energy and per-atom contributions for one system.
    pub fn energy(&self, system: &AtomicSystem) -> Result<(Real, Vec<Real>), ModelError> {
        let pass = self.forward_batch(std::slice::from_ref(system), &[])?;
        let total = pass.tape.value(pass.total_energy).item();
        let atomic = pass.tape.value(pass.atomic_energies).data().to_vec();
        Ok((total, atomic))
    }

    /// Energy and forces (`-dU/dr`) for one system.
    pub fn forces(&self, system: &AtomicSystem) -> Result<(Real, Vec<[Real; 3]>), ModelError> {
        let mut pass = self.forward_batch(std::slice::from_ref(system), &[])?;
        let total = pass.tape.value(pass.total_energy).item();
        let forces = pass.compute_forces();
        Ok((total, forces))
    }

    /// Evaluate one system, returning the requested outputs.
    pub fn predict(
        &self,
        system: &AtomicSystem,
        extra_heads: &[Head],
        with_forces: bool,
    ) -> Result<Prediction, ModelError> {
        let mut pass = self.forward_batch(std::slice::from_ref(system), extra_heads)?;
        let energy = pass.tape.value(pass.total_energy).item();
        let atomic_energies = pass.tape.value(pass.atomic_energies).data().to_vec();
        let forces = with_forces.then(|| pass.compute_forces());
        let read_vec3 = |id: ValueId| {
            let d = pass.tape.value(id).data();
            [d[0], d[1], d[2]]
        };
        let read_mat = |id: ValueId| {
            let d = pass.tape.value(id).data();
            std::array::from_fn(|k| d[k])
        };
        let dipole = pass.dipoles.map(read_vec3);
        let polarizability = pass.polarizabilities.map(read_mat);
        let shieldings = pass.shieldings.map(|id| {
            let d = pass.tape.value(id).data();
            d.chunks_exact(9).map(|m| std::array::from_fn(|k| m[k])).collect()
        });
        let chemical_shifts =
            pass.chemical_shifts.map(|id| pass.tape.value(id).data().to_vec());
        Ok(Prediction {
            energy,
            atomic_energies,
            forces,
            dipole,
            polarizability,
            shieldings,
            chemical_shifts,
        })
    }

    // ---- internals ----

    fn assemble(&self, systems: &[AtomicSystem]) -> Result<BatchLayout, ModelError> {
        if systems.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut layout = BatchLayout::default();
        for system in systems {
            let offset = layout.z.len();
            for &z in system.atomic_numbers() {
                if z > self.config.max_atomic_number {
                    return Err(ModelError::AtomicNumberOutOfRange {
                        z,
                        symbol: element_symbol(z).unwrap_or("?"),
                        max: self.config.max_atomic_number,
                    });
                }
                layout.z.push(z);
                layout.system_of_atom.push(layout.atom_counts.len());
            }
            for p in system.positions() {
                layout.positions_flat.extend_from_slice(p);
            }
            let edges = build_edges(system, self.config.cutoff)?;
            for &(i, j) in &edges.pairs {
                layout.recv.push(offset + i);
                layout.send.push(offset + j);
            }
            layout.atom_counts.push(system.len());
        }
        Ok(layout)
    }

    fn record(&self, batch: BatchLayout, extra_heads: &[Head]) -> Result<ForwardPass, ModelError> {
        let cfg = &self.config;
        let c = cfg.n_channels;
        let n = batch.z.len();
        let n_systems = batch.atom_counts.len();
        let basis = RadialBasis::new(cfg.n_rbf, cfg.cutoff)?;

        let mut tape = Tape::new();
        let staged = self.params.stage(&mut tape);
        let p = |name: &str| staged.id(name);

        let positions = tape.leaf(TensorData::new(vec![n, 3], batch.positions_flat.clone()));

        // Edge geometry, recorded on the tape so forces flow through it.
        let pos_recv = tape.gather(positions, &batch.recv);
        let pos_send = tape.gather(positions, &batch.send);
        let rel = tape.sub(pos_send, pos_recv);
        let rel_sq = tape.mul(rel, rel);
        let r_sq = tape.sum_trailing(rel_sq, 1);
        let r = tape.sqrt(r_sq);
        let r_inv = tape.recip(r);
        let r_inv3 = tape.expand_trailing(r_inv, &[3]);
        let unit = tape.mul(rel, r_inv3);
        let rbf = nn::radial_expansion(&mut tape, r, &basis);
        let phi = nn::cutoff_window(&mut tape, r, cfg.cutoff);

        // ---- embedding ----
        let z_idx: Vec<usize> = batch.z.iter().map(|&z| z as usize).collect();
        let z_rows = tape.gather(p("embed.z_table"), &z_idx);
        let z_recv = tape.gather(z_rows, &batch.recv);
        let z_send = tape.gather(z_rows, &batch.send);
        let z_pair = tape.concat_last(&[z_recv, z_send]);
        let z_edge = linear(&mut tape, z_pair, p("embed.pair.w"), Some(p("embed.pair.b")));
        let f0_iso =
            linear(&mut tape, rbf, p("embed.radial_iso.w"), Some(p("embed.radial_iso.b")));
        let f0_anti =
            linear(&mut tape, rbf, p("embed.radial_anti.w"), Some(p("embed.radial_anti.b")));
        let f0_sym =
            linear(&mut tape, rbf, p("embed.radial_sym.w"), Some(p("embed.radial_sym.b")));

        // Per-edge frame: identity, the skew matrix of the unit vector, and
        // its traceless symmetric outer product.
        let n_edges = batch.recv.len();
        let ones = tape.constant(TensorData::filled(vec![n_edges], 1.0));
        let frame_iso = tape.eye_from_scalar(ones);
        let frame_anti = tape.skew_from_vec(unit);
        let frame_sym = {
            let outer = tape.outer3(unit, unit);
            let tr = tape.trace33(outer);
            let third = tape.affine(tr, 1.0 / 3.0, 0.0);
            let eye = tape.eye_from_scalar(third);
            tape.sub(outer, eye)
        };

        let phi_c = tape.expand_trailing(phi, &[c]);
        let edge_gate = tape.mul(z_edge, phi_c);
        let edge_term = |coeff: ValueId, frame: ValueId, tape: &mut Tape| {
            let gated = tape.mul(coeff, edge_gate);
            let gated_b = tape.expand_trailing(gated, &[3, 3]);
            let frame_b = tape.expand_axis1(frame, c);
            tape.mul(frame_b, gated_b)
        };
        let x_iso = edge_term(f0_iso, frame_iso, &mut tape);
        let x_anti = edge_term(f0_anti, frame_anti, &mut tape);
        let x_sym = edge_term(f0_sym, frame_sym, &mut tape);
        let x_edge = {
            let t = tape.add(x_iso, x_anti);
            tape.add(t, x_sym)
        };
        let x_agg = tape.scatter_add(x_edge, &batch.recv, n);

        let norms = frob_sq_channels(&mut tape, x_agg);
        let normed = nn::layer_norm(
            &mut tape,
            norms,
            p("embed.norm.gamma"),
            p("embed.norm.beta"),
            LAYER_NORM_EPS,
        );
        let hidden = mlp(
            &mut tape,
            normed,
            &[
                (p("embed.mlp0.w"), Some(p("embed.mlp0.b"))),
                (p("embed.mlp1.w"), Some(p("embed.mlp1.b"))),
            ],
        );
        let gates = tape.silu(hidden);
        let (iso, anti, sym) = decompose_on_tape(&mut tape, x_agg);
        let gated_mix = |part: ValueId, w: &str, lo: usize, tape: &mut Tape| {
            let mixed = tape.mix_channels(part, p(w));
            let g = tape.slice_last(gates, lo, c);
            let g_b = tape.expand_trailing(g, &[3, 3]);
            tape.mul(mixed, g_b)
        };
        let m_iso = gated_mix(iso, "embed.mix_iso.w", 0, &mut tape);
        let m_anti = gated_mix(anti, "embed.mix_anti.w", c, &mut tape);
        let m_sym = gated_mix(sym, "embed.mix_sym.w", 2 * c, &mut tape);
        let mut state = {
            let t = tape.add(m_iso, m_anti);
            tape.add(t, m_sym)
        };
        ensure_finite_state(&tape, state, "embedding", c)?;
        let mut layer_states = vec![state];

        // ---- interaction layers ----
        for l in 0..cfg.n_interaction_layers {
            let name = |part: &str| format!("layer{l}.{part}");
            // Normalize each channel by (|X| + 1), then split it.
            let state_n = normalize_channels(&mut tape, state);
            let (iso, anti, sym) = decompose_on_tape(&mut tape, state_n);
            let y_iso = tape.mix_channels(iso, p(&name("pre_iso.w")));
            let y_anti = tape.mix_channels(anti, p(&name("pre_anti.w")));
            let y_sym = tape.mix_channels(sym, p(&name("pre_sym.w")));
            let y = {
                let t = tape.add(y_iso, y_anti);
                tape.add(t, y_sym)
            };

            // Edge filters from distances, windowed by the cutoff.
            let hidden = mlp(
                &mut tape,
                rbf,
                &[
                    (p(&name("mlp0.w")), Some(p(&name("mlp0.b")))),
                    (p(&name("mlp1.w")), Some(p(&name("mlp1.b")))),
                    (p(&name("mlp2.w")), Some(p(&name("mlp2.b")))),
                ],
            );
            let act = tape.silu(hidden);
            let phi_3c = tape.expand_trailing(phi, &[3 * c]);
            let filters = tape.mul(act, phi_3c);

            // Messages: the sender's Y components, gated per channel.
            let message_term = |part: ValueId, lo: usize, tape: &mut Tape| {
                let at_sender = tape.gather(part, &batch.send);
                let f = tape.slice_last(filters, lo, c);
                let f_b = tape.expand_trailing(f, &[3, 3]);
                tape.mul(at_sender, f_b)
            };
            let msg_iso = message_term(y_iso, 0, &mut tape);
            let msg_anti = message_term(y_anti, c, &mut tape);
            let msg_sym = message_term(y_sym, 2 * c, &mut tape);
            let msg_edge = {
                let t = tape.add(msg_iso, msg_anti);
                tape.add(t, msg_sym)
            };
            let m = tape.scatter_add(msg_edge, &batch.recv, n);

            // Matrix product of state and message stacks.
            let ym = tape.matmul33(y, m);
            let product = match cfg.equivariance_group {
                EquivarianceGroup::O3 => {
                    let my = tape.matmul33(m, y);
                    tape.add(ym, my)
                }
                EquivarianceGroup::SO3 => tape.affine(ym, 2.0, 0.0),
            };

            let product_n = normalize_channels(&mut tape, product);
            let (pi, pa, ps) = decompose_on_tape(&mut tape, product_n);
            let o_iso = tape.mix_channels(pi, p(&name("post_iso.w")));
            let o_anti = tape.mix_channels(pa, p(&name("post_anti.w")));
            let o_sym = tape.mix_channels(ps, p(&name("post_sym.w")));
            let y_new = {
                let t = tape.add(o_iso, o_anti);
                tape.add(t, o_sym)
            };
            // Residual update X <- X + Y + Y^2 on the normalized state.
            let y_sq = tape.matmul33(y_new, y_new);
            let delta = tape.add(y_new, y_sq);
            state = tape.add(state_n, delta);
            ensure_finite_state(&tape, state, &format!("interaction layer {l}"), c)?;
            layer_states.push(state);
        }

        // ---- energy head ----
        let (iso, anti, sym) = decompose_on_tape(&mut tape, state);
        let n_iso = frob_sq_channels(&mut tape, iso);
        let n_anti = frob_sq_channels(&mut tape, anti);
        let n_sym = frob_sq_channels(&mut tape, sym);
        let invariants = tape.concat_last(&[n_iso, n_anti, n_sym]);
        let normed = nn::layer_norm(
            &mut tape,
            invariants,
            p("energy.norm.gamma"),
            p("energy.norm.beta"),
            LAYER_NORM_EPS,
        );
        let u = mlp(
            &mut tape,
            normed,
            &[
                (p("energy.mlp0.w"), Some(p("energy.mlp0.b"))),
                (p("energy.mlp1.w"), Some(p("energy.mlp1.b"))),
                (p("energy.mlp2.w"), Some(p("energy.mlp2.b"))),
            ],
        );
        let u = tape.reshape(u, &[n]);
        let scaled = tape.affine(u, cfg.energy_scale, 0.0);
        let shifts = self.atom_shifts(&batch.z)?;
        let shift_node = tape.constant(TensorData::new(vec![n], shifts));
        let atomic_energies = tape.add(scaled, shift_node);
        let energies = tape.scatter_add(atomic_energies, &batch.system_of_atom, n_systems);
        let total_energy = tape.sum_all(energies);

        // ---- optional heads ----
        let mut dipoles = None;
        let mut polarizabilities = None;
        let mut shieldings = None;
        let mut chemical_shifts = None;

        if extra_heads.contains(&Head::Dipole) {
            let vectors = tape.vec_from_skew(anti);
            let v_half = tape.mix_channels(vectors, p("dipole.chain0.w"));
            let v_one = tape.mix_channels(v_half, p("dipole.chain1.w"));
            let mu_atom = tape.reshape(v_one, &[n, 3]);
            let gate = self.scalar_gate(&mut tape, n_anti, "dipole.gate", &staged);
            let g = tape.reshape(gate, &[n]);
            let g_b = tape.expand_trailing(g, &[3]);
            let gated = tape.mul(mu_atom, g_b);
            dipoles = Some(tape.scatter_add(gated, &batch.system_of_atom, n_systems));
        }

        if extra_heads.contains(&Head::Polarizability) {
            let a_iso = chain_to_matrix(&mut tape, iso, "polar.iso", &staged, n);
            let a_sym = chain_to_matrix(&mut tape, sym, "polar.sym", &staged, n);
            let both = tape.add(iso, sym);
            let n_both = frob_sq_channels(&mut tape, both);
            let gate = self.scalar_gate(&mut tape, n_both, "polar.gate", &staged);
            let g_iso = gate_slice(&mut tape, gate, 0, n);
            let g_sym = gate_slice(&mut tape, gate, 1, n);
            let t_iso = tape.mul(a_iso, g_iso);
            let t_sym = tape.mul(a_sym, g_sym);
            let alpha_atom = tape.add(t_iso, t_sym);
            polarizabilities =
                Some(tape.scatter_add(alpha_atom, &batch.system_of_atom, n_systems));
        }

        if extra_heads.contains(&Head::Shielding) {
            let weights = self.shielding_weights(&batch.z)?;
            let pv = pseudovector_channels(&mut tape, anti, p("shield.pv_a.w"), p("shield.pv_b.w"));
            let s_iso = chain_to_matrix(&mut tape, iso, "shield.iso", &staged, n);
            let s_pv = chain_to_matrix(&mut tape, pv, "shield.pv", &staged, n);
            let s_sym = chain_to_matrix(&mut tape, sym, "shield.sym", &staged, n);
            let all = {
                let t = tape.add(iso, pv);
                tape.add(t, sym)
            };
            let n_all = frob_sq_channels(&mut tape, all);
            let gate = self.scalar_gate(&mut tape, n_all, "shield.gate", &staged);
            let g_iso = gate_slice(&mut tape, gate, 0, n);
            let g_pv = gate_slice(&mut tape, gate, 1, n);
            let g_sym = gate_slice(&mut tape, gate, 2, n);
            let t0 = tape.mul(s_iso, g_iso);
            let t1 = tape.mul(s_pv, g_pv);
            let t2 = tape.mul(s_sym, g_sym);
            let summed = {
                let t = tape.add(t0, t1);
                tape.add(t, t2)
            };
            let w_node = tape.constant(TensorData::new(vec![n], weights));
            let w_b = tape.expand_trailing(w_node, &[3, 3]);
            let sigma = tape.mul(summed, w_b);
            let tr = tape.trace33(sigma);
            chemical_shifts = Some(tape.affine(tr, 1.0 / 3.0, 0.0));
            shieldings = Some(sigma);
        }

        Ok(ForwardPass {
            tape,
            staged,
            positions,
            total_energy,
            energies,
            atomic_energies,
            dipoles,
            polarizabilities,
            shieldings,
            chemical_shifts,
            layer_states,
            system_of_atom: batch.system_of_atom,
            atom_counts: batch.atom_counts,
            n_edges,
        })
    }

    /// Two-layer gated reduction `silu(mlp(invariants))` used by all heads.
    fn scalar_gate(
        &self,
        tape: &mut Tape,
        invariants: ValueId,
        prefix: &str,
        staged: &StagedParams,
    ) -> ValueId {
        let h = mlp(
            tape,
            invariants,
            &[
                (staged.id(&format!("{prefix}0.w")), Some(staged.id(&format!("{prefix}0.b")))),
                (staged.id(&format!("{prefix}1.w")), Some(staged.id(&format!("{prefix}1.b")))),
            ],
        );
        tape.silu(h)
    }

    fn atom_shifts(&self, z: &[u32]) -> Result<Vec<Real>, ModelError> {
        match &self.config.atomic_ref_energies {
            None => Ok(vec![self.config.energy_shift; z.len()]),
            Some(refs) => z
                .iter()
                .map(|&zi| {
                    refs.iter().find(|(rz, _)| *rz == zi).map(|&(_, e)| e).ok_or(
                        ModelError::MissingReferenceEnergy {
                            z: zi,
                            symbol: element_symbol(zi).unwrap_or("?"),
                        },
                    )
                })
                .collect(),
        }
    }

    fn shielding_weights(&self, z: &[u32]) -> Result<Vec<Real>, ModelError> {
        z.iter()
            .map(|&zi| {
                self.config
                    .element_weights
                    .iter()
                    .find(|(wz, _)| *wz == zi)
                    .map(|&(_, w)| w)
                    .ok_or(ModelError::MissingElementWeight {
                        z: zi,
                        symbol: element_symbol(zi).unwrap_or("?"),
                    })
            })
            .collect()
    }
}

#[derive(Default)]
struct BatchLayout {
    z: Vec<u32>,
    positions_flat: Vec<Real>,
    system_of_atom: Vec<usize>,
    atom_counts: Vec<usize>,
    recv: Vec<usize>,
    send: Vec<usize>,
}

/// A recorded forward pass: the tape plus ids of everything downstream code
/// needs (outputs for readout or loss terms, positions for forces, per-layer
/// states for diagnostics).
pub struct ForwardPass {
    pub tape: Tape,
    pub staged: StagedParams,
    pub positions: ValueId,
    /// Scalar: sum of all per-system energies.
    pub total_energy: ValueId,
    /// `[n_systems]`.
    pub energies: ValueId,
    /// `[n_atoms]`.
    pub atomic_energies: ValueId,
    /// `[n_systems, 3]`.
    pub dipoles: Option<ValueId>,
    /// `[n_systems, 3, 3]`, symmetric by construction.
    pub polarizabilities: Option<ValueId>,
    /// `[n_atoms, 3, 3]`.
    pub shieldings: Option<ValueId>,
    /// `[n_atoms]`: one third of each shielding trace.
    pub chemical_shifts: Option<ValueId>,
    /// `[n_atoms, C, 3, 3]` after the embedding and after every layer.
    pub layer_states: Vec<ValueId>,
    pub system_of_atom: Vec<usize>,
    pub atom_counts: Vec<usize>,
    pub n_edges: usize,
}

impl ForwardPass {
    /// Backpropagate the total energy and return `-dU/dr` per atom.
    pub fn compute_forces(&mut self) -> Vec<[Real; 3]> {
        let n = self.system_of_atom.len();
        let grads = self.tape.backward(self.total_energy);
        match grads.get(self.positions) {
            None => vec![[0.0; 3]; n],
            Some(g) => {
                let data = self.tape.value(g).data();
                (0..n)
                    .map(|i| [-data[3 * i], -data[3 * i + 1], -data[3 * i + 2]])
                    .collect()
            }
        }
    }
}

/// Outputs for a single system.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub energy: Real,
    pub atomic_energies: Vec<Real>,
    pub forces: Option<Vec<[Real; 3]>>,
    pub dipole: Option<[Real; 3]>,
    pub polarizability: Option<[Real; 9]>,
    pub shieldings: Option<Vec<[Real; 9]>>,
    pub chemical_shifts: Option<Vec<Real>>,
}

// ---- taped building blocks ----

/// Split a stack of 3x3 matrices into its isotropic, antisymmetric, and
/// traceless-symmetric parts, all on the tape.
pub fn decompose_on_tape(tape: &mut Tape, x: ValueId) -> (ValueId, ValueId, ValueId) {
    let tr = tape.trace33(x);
    let third = tape.affine(tr, 1.0 / 3.0, 0.0);
    let iso = tape.eye_from_scalar(third);
    let xt = tape.transpose33(x);
    let diff = tape.sub(x, xt);
    let anti = tape.affine(diff, 0.5, 0.0);
    let sum = tape.add(x, xt);
    let half_sum = tape.affine(sum, 0.5, 0.0);
    let sym = tape.sub(half_sum, iso);
    (iso, anti, sym)
}

/// Per-channel squared Frobenius norm: `[..., 3, 3] -> [...]`.
pub fn frob_sq_channels(tape: &mut Tape, x: ValueId) -> ValueId {
    let sq = tape.mul(x, x);
    tape.sum_trailing(sq, 2)
}

/// Divide every channel by its squared Frobenius norm plus one.
fn normalize_channels(tape: &mut Tape, x: ValueId) -> ValueId {
    let norms = frob_sq_channels(tape, x);
    let denom = tape.affine(norms, 1.0, 1.0);
    let inv = tape.recip(denom);
    let inv_b = tape.expand_trailing(inv, &[3, 3]);
    tape.mul(x, inv_b)
}

/// Build parity-even skew channels from parity-odd ones: mix the input twice
/// independently and take the antisymmetric part of the two mixes' product.
pub fn pseudovector_channels(
    tape: &mut Tape,
    anti: ValueId,
    w_a: ValueId,
    w_b: ValueId,
) -> ValueId {
    let a1 = tape.mix_channels(anti, w_a);
    let a2 = tape.mix_channels(anti, w_b);
    let prod = tape.matmul33(a1, a2);
    let prod_t = tape.transpose33(prod);
    let diff = tape.sub(prod, prod_t);
    tape.affine(diff, 0.5, 0.0)
}

/// Reduce `[n, C, 3, 3]` channels to one matrix per atom through a bias-free
/// two-step channel mix (C -> C/2 -> 1).
fn chain_to_matrix(
    tape: &mut Tape,
    part: ValueId,
    prefix: &str,
    staged: &StagedParams,
    n: usize,
) -> ValueId {
    let half = tape.mix_channels(part, staged.id(&format!("{prefix}0.w")));
    let one = tape.mix_channels(half, staged.id(&format!("{prefix}1.w")));
    tape.reshape(one, &[n, 3, 3])
}

/// Pick gate column `k` from `[n, G]` and broadcast it over 3x3 entries.
fn gate_slice(tape: &mut Tape, gates: ValueId, k: usize, n: usize) -> ValueId {
    let g = tape.slice_last(gates, k, 1);
    let g = tape.reshape(g, &[n]);
    tape.expand_trailing(g, &[3, 3])
}

fn ensure_finite_state(
    tape: &Tape,
    state: ValueId,
    stage: &str,
    channels: usize,
) -> Result<(), ModelError> {
    let data = tape.value(state).data();
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(ModelError::NonFiniteState {
                stage: stage.to_string(),
                channel: (i / 9) % channels,
            });
        }
    }
    Ok(())
}
