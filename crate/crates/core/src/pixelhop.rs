//! Three-level channel-wise Saab tree.
//!
//! Every level runs one Saab transform per input channel (a "unit"), followed
//! by 2×2 max-pooling. Each kernel of a unit becomes a node of the tree. A
//! node's energy share within its unit is `e_init`; its share of the root's
//! energy is the product of `e_init` along the path (`e_norm`). Nodes below
//! the cutoff energy are discarded, nodes at or above the forward energy feed
//! the next level, and the rest stay as leaves.
//!
//! For a 32×32 input the spatial chain is 32 → 28 → 14 → 10 → 5 → 1.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::preprocess::ImageTensor;
use crate::saab::{extract_patches, max_pool_2x2, KeepRule, PatchSet, SaabAccumulator, SaabKernelBank};
use crate::{Error, Result};

pub const LEVELS: usize = 3;

const FIT_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelHopConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub window: usize,
    pub stride: usize,
    /// E_C: nodes whose normalized energy is below this are discarded.
    pub energy_cutoff: f64,
    /// E_F: nodes whose normalized energy reaches this feed the next level.
    pub energy_forward: f64,
    /// Fit one transform over all input channels at level 1 instead of one
    /// per channel. Used for the chroma planes, which are correlated.
    pub joint_first_level: bool,
    /// Fraction of training patches used for fitting each unit.
    pub patch_sample_rate: f64,
    pub seed: u64,
}

impl PixelHopConfig {
    /// Luma submodel with E_C = E_F = `energy`.
    pub fn luma(energy: f64) -> Self {
        Self {
            input_size: 32,
            input_channels: 1,
            window: 5,
            stride: 1,
            energy_cutoff: energy,
            energy_forward: energy,
            joint_first_level: false,
            patch_sample_rate: 1.0,
            seed: 0,
        }
    }

    /// Chroma (Cr, Cb) submodel with a joint 5×5×2 first level.
    pub fn chroma(energy: f64) -> Self {
        Self { input_channels: 2, joint_first_level: true, ..Self::luma(energy) }
    }

    pub fn validate(&self) -> Result<()> {
        let (ec, ef) = (self.energy_cutoff, self.energy_forward);
        if !(0.0..=1.0).contains(&ec) || !(0.0..=1.0).contains(&ef) || ec > ef {
            return Err(Error::InvalidInput(format!(
                "energy thresholds must satisfy 0 <= E_C <= E_F <= 1, got E_C={ec}, E_F={ef}"
            )));
        }
        if self.input_channels == 0 || self.window == 0 || self.stride == 0 {
            return Err(Error::InvalidInput("channels, window and stride must be positive".into()));
        }
        if !(self.patch_sample_rate > 0.0 && self.patch_sample_rate <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "patch sample rate must be in (0, 1], got {}",
                self.patch_sample_rate
            )));
        }
        let chain = self.spatial_chain()?;
        if chain[LEVELS - 1].0 != 1 {
            return Err(Error::InvalidInput(format!(
                "input size {} leaves a {0}x{0} grid at level 3; it must be 1x1",
                chain[LEVELS - 1].0
            )));
        }
        Ok(())
    }

    /// (response side, pooled side) per level.
    pub fn spatial_chain(&self) -> Result<[(usize, usize); LEVELS]> {
        let mut side = self.input_size;
        let mut chain = [(0, 0); LEVELS];
        for (level, slot) in chain.iter_mut().enumerate() {
            if side < self.window {
                return Err(Error::InvalidInput(format!(
                    "input size {} is too small for level {}",
                    self.input_size,
                    level + 1
                )));
            }
            let grid = (side - self.window) / self.stride + 1;
            side = grid / 2;
            *slot = (grid, side);
        }
        Ok(chain)
    }

    fn level1_groups(&self) -> Vec<Vec<usize>> {
        if self.joint_first_level || self.input_channels == 1 {
            vec![(0..self.input_channels).collect()]
        } else {
            (0..self.input_channels).map(|c| vec![c]).collect()
        }
    }
}

/// Path from the root: level-1 unit index, then one kernel index per level.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub Vec<u16>);

impl NodeId {
    pub fn level(&self) -> usize {
        self.0.len() - 1
    }

    pub fn parent(&self) -> Option<NodeId> {
        (self.level() > 1).then(|| NodeId(self.0[..self.0.len() - 1].to_vec()))
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u16::to_string).collect();
        write!(f, "{}", parts.join("."))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Intermediate,
    Leaf,
    Discarded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HopNode {
    pub id: NodeId,
    pub level: usize,
    /// Index into [`PixelHopModel::units`].
    pub unit: usize,
    /// Kernel column in the unit's bank. Slots past the bank's kept kernels
    /// mark directions the training data could not support.
    pub kernel: usize,
    pub e_init: f64,
    pub e_norm: f64,
    pub status: NodeStatus,
}

impl HopNode {
    pub fn is_kept(&self) -> bool {
        self.status != NodeStatus::Discarded
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum UnitInput {
    /// Channels of the input image (level 1).
    Channels(Vec<usize>),
    /// Pooled responses of a node of the previous level, by index into that
    /// level's node list.
    Node(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct HopUnit {
    pub level: usize,
    pub input: UnitInput,
    pub bank: SaabKernelBank,
    /// Nodes of this unit are `first_node..first_node + node_count` in the
    /// level's node list.
    pub first_node: usize,
    pub node_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelHopModel {
    pub config: PixelHopConfig,
    pub units: Vec<HopUnit>,
    /// Nodes per level, in node-id order.
    pub levels: [Vec<HopNode>; LEVELS],
}

/// Pre-pooling responses of every kept node.
#[derive(Clone, Debug, PartialEq)]
pub struct HopOutputs {
    /// K₁ maps of `level1_side`² values.
    pub level1: Vec<Vec<f64>>,
    pub level1_side: usize,
    /// K₂ maps of `level2_side`² values.
    pub level2: Vec<Vec<f64>>,
    pub level2_side: usize,
    /// K₃ scalars.
    pub level3: Vec<f64>,
}

impl HopOutputs {
    pub fn counts(&self) -> [usize; LEVELS] {
        [self.level1.len(), self.level2.len(), self.level3.len()]
    }
}

/// Per-level state while running an image through the tree.
struct Forward {
    /// Pooled map of each intermediate node of the last level run.
    pooled: Vec<Option<Vec<f64>>>,
    pooled_side: usize,
    maps: [Vec<Vec<f64>>; LEVELS],
}

impl PixelHopModel {
    /// K₁, K₂, K₃: kept (intermediate or leaf) nodes per level.
    pub fn level_counts(&self) -> [usize; LEVELS] {
        let mut k = [0; LEVELS];
        for (slot, nodes) in k.iter_mut().zip(&self.levels) {
            *slot = nodes.iter().filter(|n| n.is_kept()).count();
        }
        k
    }

    pub fn units_at(&self, level: usize) -> impl Iterator<Item = &HopUnit> {
        self.units.iter().filter(move |u| u.level == level)
    }

    pub fn kept_nodes(&self, level: usize) -> impl Iterator<Item = &HopNode> {
        self.levels[level - 1].iter().filter(|n| n.is_kept())
    }

    fn unit_input(&self, unit: &HopUnit, image: &ImageTensor, state: &Forward) -> ImageTensor {
        match &unit.input {
            UnitInput::Channels(chs) if chs.len() == image.channels() => image.clone(),
            UnitInput::Channels(chs) => {
                ImageTensor::from_fn(image.height(), image.width(), chs.len(), |r, c, i| {
                    image.get(r, c, chs[i])
                })
            }
            UnitInput::Node(i) => {
                let map = state.pooled[*i].as_ref().expect("parent node is intermediate");
                ImageTensor::new(state.pooled_side, state.pooled_side, 1, map.clone())
                    .expect("pooled maps are finite")
            }
        }
    }

    /// Run `image` through the first `depth` levels.
    fn forward(&self, image: &ImageTensor, depth: usize, emit: bool) -> Forward {
        let cfg = &self.config;
        let mut state = Forward { pooled: Vec::new(), pooled_side: 0, maps: Default::default() };
        for level in 1..=depth {
            let nodes = &self.levels[level - 1];
            let mut pooled = vec![None; nodes.len()];
            let mut pooled_side = 0;
            let mut maps = Vec::new();
            for unit in self.units_at(level) {
                let wanted: Vec<usize> = (0..unit.bank.n_kept())
                    .filter(|&k| {
                        let status = nodes[unit.first_node + k].status;
                        status == NodeStatus::Intermediate || (emit && status == NodeStatus::Leaf)
                    })
                    .collect();
                if wanted.is_empty() {
                    continue;
                }
                let input = self.unit_input(unit, image, &state);
                let patches = extract_patches(&input, cfg.window, cfg.stride).expect("validated geometry");
                let (gh, gw) = patches.grid();
                let mut unit_maps = vec![Vec::with_capacity(patches.len()); wanted.len()];
                for p in patches.rows() {
                    let sum: f64 = p.iter().sum();
                    for (map, &k) in unit_maps.iter_mut().zip(&wanted) {
                        map.push(unit.bank.project_with_sum(p, sum, k) + unit.bank.bias);
                    }
                }
                for (map, &k) in unit_maps.into_iter().zip(&wanted) {
                    let node = &nodes[unit.first_node + k];
                    if node.status == NodeStatus::Intermediate {
                        let (p, ph, _) = max_pool_2x2(&map, gh, gw).expect("grid at least 2x2");
                        pooled[unit.first_node + k] = Some(p);
                        pooled_side = ph;
                    }
                    if emit {
                        maps.push(map);
                    }
                }
            }
            state.maps[level - 1] = maps;
            state.pooled = pooled;
            state.pooled_side = pooled_side;
        }
        state
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        let cfg = &self.config;
        if image.height() != cfg.input_size
            || image.width() != cfg.input_size
            || image.channels() != cfg.input_channels
        {
            return Err(Error::InvalidInput(format!(
                "expected a {0}x{0}x{1} image, got {2}x{3}x{4}",
                cfg.input_size,
                cfg.input_channels,
                image.height(),
                image.width(),
                image.channels()
            )));
        }
        Ok(())
    }

    /// Responses of every kept node at all three levels (before pooling).
    pub fn apply(&self, image: &ImageTensor) -> Result<HopOutputs> {
        self.check_image(image)?;
        let chain = self.config.spatial_chain()?;
        let mut state = self.forward(image, LEVELS, true);
        let [l1, l2, l3] = std::mem::take(&mut state.maps);
        Ok(HopOutputs {
            level1: l1,
            level1_side: chain[0].0,
            level2: l2,
            level2_side: chain[1].0,
            level3: l3.into_iter().map(|m| m[0]).collect(),
        })
    }

    /// [`apply`](Self::apply) over many images in parallel; output order
    /// matches input order.
    pub fn apply_batch(&self, images: &[ImageTensor]) -> Result<Vec<HopOutputs>> {
        images.par_iter().map(|img| self.apply(img)).collect()
    }

    /// Parameter counts per level under the given accounting.
    pub fn count_parameters(&self, accounting: Accounting) -> [usize; LEVELS] {
        let level1_dim = match accounting {
            Accounting::Text => self.units_at(1).map(|u| u.bank.patch_dim).max().unwrap_or(0),
            Accounting::Table4 => self.config.window * self.config.window,
        };
        hop_parameter_counts(
            self.level_counts(),
            level1_dim,
            self.units_at(1).count(),
            self.config.window * self.config.window,
        )
    }
}

/// Fit the three-level tree on a set of equally sized images.
pub fn fit_pixelhop(images: &[ImageTensor], config: &PixelHopConfig) -> Result<PixelHopModel> {
    config.validate()?;
    if images.len() < 2 {
        return Err(Error::Fit(format!("need at least 2 training images, got {}", images.len())));
    }
    let mut model = PixelHopModel {
        config: config.clone(),
        units: Vec::new(),
        levels: Default::default(),
    };
    for image in images {
        model.check_image(image)?;
    }

    for level in 1..=LEVELS {
        // Without intermediate nodes the deeper levels stay empty.
        let plans = plan_units(&model, level);
        if plans.is_empty() {
            break;
        }
        let banks = fit_level(&mut model, level, &plans, images)?;
        attach_level(&mut model, level, plans, banks);
        if level == 1 && model.levels[0].iter().all(|n| !n.is_kept()) {
            return Err(Error::Fit("every first-level node was discarded".into()));
        }
    }
    Ok(model)
}

struct UnitPlan {
    input: UnitInput,
    prefix: Vec<u16>,
    parent_energy: f64,
    patch_dim: usize,
}

fn plan_units(model: &PixelHopModel, level: usize) -> Vec<UnitPlan> {
    let cfg = &model.config;
    let area = cfg.window * cfg.window;
    if level == 1 {
        return cfg
            .level1_groups()
            .into_iter()
            .enumerate()
            .map(|(i, chs)| UnitPlan {
                patch_dim: area * chs.len(),
                input: UnitInput::Channels(chs),
                prefix: vec![i as u16],
                parent_energy: 1.0,
            })
            .collect();
    }
    model.levels[level - 2]
        .iter()
        .enumerate()
        .filter(|(_, n)| n.status == NodeStatus::Intermediate)
        .map(|(i, n)| UnitPlan {
            input: UnitInput::Node(i),
            prefix: n.id.0.clone(),
            parent_energy: n.e_norm,
            patch_dim: area,
        })
        .collect()
}

fn sample_seed(seed: u64, level: usize, unit: usize, image: usize) -> u64 {
    let mut x = seed ^ ((level as u64) << 56) ^ ((unit as u64) << 32) ^ image as u64;
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn fit_level(
    model: &mut PixelHopModel,
    level: usize,
    plans: &[UnitPlan],
    images: &[ImageTensor],
) -> Result<Vec<SaabKernelBank>> {
    // Temporary units so the forward pass can build inputs for this level.
    let probe_units: Vec<HopUnit> = plans
        .iter()
        .map(|p| HopUnit {
            level,
            input: p.input.clone(),
            bank: SaabKernelBank {
                patch_dim: p.patch_dim,
                kernels: Vec::new(),
                eigenvalues: Vec::new(),
                dc_energy_raw: 0.0,
                bias: 0.0,
                deficient_slots: 0,
            },
            first_node: 0,
            node_count: 0,
        })
        .collect();
    let cfg = model.config.clone();
    let model_ref: &PixelHopModel = model;
    let unit_patches = |image_index: usize, image: &ImageTensor| -> Vec<PatchSet> {
        let state = model_ref.forward(image, level - 1, false);
        probe_units
            .iter()
            .enumerate()
            .map(|(u, unit)| {
                let input = model_ref.unit_input(unit, image, &state);
                let patches = extract_patches(&input, cfg.window, cfg.stride).expect("validated geometry");
                if cfg.patch_sample_rate >= 1.0 {
                    return patches;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, level, u, image_index));
                let kept: Vec<f64> = patches
                    .rows()
                    .filter(|_| rng.random::<f64>() < cfg.patch_sample_rate)
                    .flatten()
                    .copied()
                    .collect();
                PatchSet::from_rows(patches.patch_dim(), kept).expect("rows of patch width")
            })
            .collect()
    };

    // Fixed chunk boundaries and an in-order merge keep the fit independent of
    // thread scheduling.
    let partials: Vec<Vec<SaabAccumulator>> = images
        .par_chunks(FIT_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut accs: Vec<SaabAccumulator> =
                plans.iter().map(|p| SaabAccumulator::new(p.patch_dim)).collect();
            for (i, image) in chunk.iter().enumerate() {
                for (acc, patches) in accs.iter_mut().zip(unit_patches(c * FIT_CHUNK + i, image)) {
                    acc.add_patches(&patches).expect("unit patch width");
                }
            }
            accs
        })
        .collect();
    let mut accs: Vec<SaabAccumulator> = plans.iter().map(|p| SaabAccumulator::new(p.patch_dim)).collect();
    for part in partials {
        for (acc, p) in accs.iter_mut().zip(part) {
            acc.merge(p);
        }
    }
    let mut banks = accs
        .iter()
        .enumerate()
        .map(|(u, acc)| {
            acc.finish(KeepRule::All)
                .map_err(|e| Error::Fit(format!("level {level}, unit {u}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;

    // Second pass: smallest response per unit sets the bias. A minimum does
    // not depend on evaluation order.
    let banks_ref = &banks;
    let mins: Vec<f64> = images
        .par_iter()
        .enumerate()
        .map(|(i, image)| {
            unit_patches(i, image)
                .iter()
                .zip(banks_ref)
                .map(|(p, b)| b.min_response(p.rows()))
                .collect::<Vec<f64>>()
        })
        .reduce(
            || vec![0.0; plans.len()],
            |a, b| a.iter().zip(&b).map(|(x, y)| x.min(*y)).collect(),
        );
    for (bank, min) in banks.iter_mut().zip(mins) {
        bank.set_bias_from_min(min);
    }
    Ok(banks)
}

fn attach_level(model: &mut PixelHopModel, level: usize, plans: Vec<UnitPlan>, banks: Vec<SaabKernelBank>) {
    let (ec, ef) = (model.config.energy_cutoff, model.config.energy_forward);
    let mut nodes = Vec::new();
    for (plan, bank) in plans.into_iter().zip(banks) {
        let unit_index = model.units.len();
        let shares = bank.energy_shares();
        let slots = bank.n_kept() + bank.deficient_slots;
        let first_node = nodes.len();
        for k in 0..slots {
            let e_init = shares.get(k).copied().unwrap_or(0.0);
            let e_norm = plan.parent_energy * e_init;
            let status = if k >= bank.n_kept() || e_norm < ec {
                NodeStatus::Discarded
            } else if level < LEVELS && e_norm >= ef {
                NodeStatus::Intermediate
            } else {
                NodeStatus::Leaf
            };
            let mut path = plan.prefix.clone();
            path.push(k as u16);
            nodes.push(HopNode { id: NodeId(path), level, unit: unit_index, kernel: k, e_init, e_norm, status });
        }
        model.units.push(HopUnit { level, input: plan.input, bank, first_node, node_count: slots });
    }
    debug_assert!(nodes.windows(2).all(|w| w[0].id < w[1].id));
    model.levels[level - 1] = nodes;
}

/// How the first level of a multi-channel joint transform is counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Accounting {
    /// Kernels at their true length (50 for a joint 5×5×2 transform).
    Text,
    /// Every kernel counted as 25 values, as in the published size table.
    Table4,
}

/// Parameters per level from node counts.
///
/// Level 1 stores `level1_dim` values per kept kernel plus one bias per
/// transform. Deeper levels store `area` values per new kernel; the DC kernel
/// of each per-channel transform is fixed and not stored, so the `K_{ℓ-1}`
/// repeated DC kernels are replaced by one bias each.
pub fn hop_parameter_counts(
    counts: [usize; LEVELS],
    level1_dim: usize,
    level1_units: usize,
    area: usize,
) -> [usize; LEVELS] {
    let mut out = [0; LEVELS];
    out[0] = level1_dim * counts[0] + level1_units;
    for l in 1..LEVELS {
        out[l] = area * counts[l].saturating_sub(counts[l - 1]) + counts[l - 1];
    }
    out
}
