//! Synthetic two-hand landmark recordings of a six-class assembly task.
//!
//! Every class owns a fixed pattern of human and robot task modules. Each
//! human module follows its own smooth wrist path for both hands, with a
//! class-specific finger flex rhythm. Operators differ by a global scale
//! applied to all coordinates (hand size), by tempo, and by noise level.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::frame::{
    Agent, Dataset, LandmarkFrame, ModuleSpan, Recording, COORDS, LANDMARKS, NO_LABEL, NUM_CLASSES,
};
use crate::error::{Error, Result};
use crate::seed;

/// Reference hand length in centimetres; operator scales are relative to it.
pub const REFERENCE_HAND_CM: f64 = 20.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub operator_id: u32,
    /// Global coordinate scale (hand size relative to the reference operator).
    pub hand_scale: f64,
    /// Speed multiplier; module lengths are divided by it.
    pub tempo: f64,
    /// Standard deviation of per-coordinate Gaussian noise before scaling.
    pub noise_std: f64,
}

impl OperatorSpec {
    /// Operator with a hand of `hand_cm` centimetres.
    pub fn from_hand_length(operator_id: u32, hand_cm: f64, tempo: f64, noise_std: f64) -> Self {
        Self {
            operator_id,
            hand_scale: hand_cm / REFERENCE_HAND_CM,
            tempo,
            noise_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    /// Seed of the class templates, shared by every operator.
    pub layout_seed: u64,
    /// Human module length range at tempo 1, inclusive.
    pub module_len: (usize, usize),
    pub robot_len: (usize, usize),
    pub idle_len: (usize, usize),
    /// Human modules per class.
    pub human_modules_per_class: usize,
    /// Waypoints per wrist path.
    pub waypoints: usize,
    /// Half-width of the box around each wrist's centre that holds waypoints.
    pub waypoint_spread: f64,
    /// Per-assembly waypoint jitter (half-width of a uniform draw).
    pub waypoint_jitter: f64,
    /// Minimum RMS per-frame L2 distance between class mean trajectories.
    pub class_separation: f64,
    /// Hand length in image units for the reference operator.
    pub hand_size: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            layout_seed: 0x5eed,
            module_len: (40, 80),
            robot_len: (8, 16),
            idle_len: (3, 8),
            human_modules_per_class: 2,
            waypoints: 4,
            waypoint_spread: 0.05,
            waypoint_jitter: 0.01,
            class_separation: 0.1,
            hand_size: 0.12,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("module", self.module_len),
            ("robot", self.robot_len),
            ("idle", self.idle_len),
        ];
        for (name, (lo, hi)) in ranges {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("invalid {name} length range {lo}..={hi}")));
            }
        }
        if self.module_len.0 < 2 {
            return Err(Error::Config("human modules need at least 2 frames".into()));
        }
        if self.human_modules_per_class == 0 || self.waypoints < 2 {
            return Err(Error::Config(
                "need at least one human module per class and two waypoints".into(),
            ));
        }
        if !(self.waypoint_spread > 0.0 && self.waypoint_jitter >= 0.0 && self.class_separation >= 0.0 && self.hand_size > 0.0) {
            return Err(Error::Config("generator scales must be non-negative".into()));
        }
        Ok(())
    }
}

/// Four reference operators with hand lengths 20.5, 17.0, 18.0 and 20.0 cm.
pub fn reference_operators() -> Vec<OperatorSpec> {
    [(1, 20.5, 1.0), (2, 17.0, 0.92), (3, 18.0, 1.08), (4, 20.0, 0.96)]
        .into_iter()
        .map(|(id, cm, tempo)| OperatorSpec::from_hand_length(id, cm, tempo, 0.004))
        .collect()
}

/// Canonical right-hand landmark offsets in hand-size units (wrist at the
/// origin, fingers pointing up the image).
fn hand_template() -> [[f64; 3]; LANDMARKS] {
    let mut t = [[0.0; 3]; LANDMARKS];
    let fingers: [(f64, [f64; 4]); 5] = [
        (-1.0, [0.22, 0.2, 0.16, 0.12]),
        (-0.35, [0.42, 0.2, 0.14, 0.11]),
        (-0.08, [0.44, 0.22, 0.15, 0.12]),
        (0.18, [0.42, 0.2, 0.14, 0.11]),
        (0.42, [0.38, 0.16, 0.12, 0.1]),
    ];
    for (f, (angle, segs)) in fingers.iter().enumerate() {
        let (dx, dy) = (angle.sin(), -angle.cos());
        let mut dist = 0.0;
        for (j, seg) in segs.iter().enumerate() {
            dist += seg;
            t[1 + 4 * f + j] = [dx * dist, dy * dist, -0.02 * (j as f64 + 1.0)];
        }
    }
    t
}

/// Smooth path through waypoints with cosine easing between neighbours.
fn path_point(points: &[[f64; 3]], s: f64) -> [f64; 3] {
    let segs = (points.len() - 1) as f64;
    let u = (s.clamp(0.0, 1.0) * segs).min(segs - 1e-12);
    let i = u.floor() as usize;
    let w = 0.5 - 0.5 * (PI * (u - i as f64)).cos();
    let (a, b) = (points[i], points[i + 1]);
    [
        a[0] + (b[0] - a[0]) * w,
        a[1] + (b[1] - a[1]) * w,
        a[2] + (b[2] - a[2]) * w,
    ]
}

#[derive(Debug, Clone, PartialEq)]
struct ModuleTemplate {
    right: Vec<[f64; 3]>,
    left: Vec<[f64; 3]>,
    flex_cycles: f64,
    flex_depth: f64,
}

/// Class layouts derived from the layout seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTemplates {
    modules: Vec<Vec<ModuleTemplate>>,
    patterns: Vec<Vec<Agent>>,
    hand: [[f64; 3]; LANDMARKS],
}

const RIGHT_CENTRE: [f64; 2] = [0.62, 0.72];
const LEFT_CENTRE: [f64; 2] = [0.38, 0.72];
const REST_RIGHT: [f64; 3] = [0.68, 0.82, 0.0];
const REST_LEFT: [f64; 3] = [0.32, 0.82, 0.0];

/// Noise-free frame for both wrists, a flex level in `[0, 1]` and a scale.
fn render(hand: &[[f64; 3]; LANDMARKS], right: [f64; 3], left: [f64; 3], flex: f64, size: f64, scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; COORDS];
    for (h, wrist, mirror) in [(0, left, -1.0), (1, right, 1.0)] {
        for (l, off) in hand.iter().enumerate() {
            // Landmarks past each finger's base joint curl toward the palm.
            let curl = if l == 0 || (l - 1) % 4 == 0 { 1.0 } else { 1.0 - 0.45 * flex };
            let base = h * LANDMARKS * 3 + l * 3;
            out[base] = scale * (wrist[0] + mirror * size * off[0] * curl);
            out[base + 1] = scale * (wrist[1] + size * off[1] * curl);
            out[base + 2] = scale * (wrist[2] + size * (off[2] - 0.03 * flex));
        }
    }
    out
}

impl ClassTemplates {
    pub fn new(spec: &GeneratorSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.layout_seed, "layout"));
        let hand = hand_template();
        let patterns: Vec<Vec<Agent>> = (0..NUM_CLASSES)
            .map(|c| {
                let mut p = vec![Agent::Human; spec.human_modules_per_class];
                p.insert((c + 1) % (p.len() + 1), Agent::Robot);
                p
            })
            .collect();
        for _attempt in 0..1000 {
            let modules: Vec<Vec<ModuleTemplate>> = (0..NUM_CLASSES)
                .map(|_| {
                    (0..spec.human_modules_per_class)
                        .map(|_| {
                            let w = spec.waypoint_spread;
                            let mut path = |c: [f64; 2]| -> Vec<[f64; 3]> {
                                (0..spec.waypoints)
                                    .map(|_| {
                                        [
                                            c[0] + rng.random_range(-w..w),
                                            c[1] + rng.random_range(-w..w),
                                            rng.random_range(-0.05..0.05),
                                        ]
                                    })
                                    .collect()
                            };
                            ModuleTemplate {
                                right: path(RIGHT_CENTRE),
                                left: path(LEFT_CENTRE),
                                flex_cycles: rng.random_range(1.0..2.0),
                                flex_depth: rng.random_range(0.4..0.8),
                            }
                        })
                        .collect()
                })
                .collect();
            let t = Self {
                modules,
                patterns: patterns.clone(),
                hand,
            };
            if t.min_class_distance(spec) >= spec.class_separation {
                return Ok(t);
            }
        }
        Err(Error::Config(format!(
            "could not place class templates {} apart",
            spec.class_separation
        )))
    }

    fn base_frame(&self, class: usize, slot: usize, s: f64, spec: &GeneratorSpec) -> Vec<f64> {
        let m = &self.modules[class][slot];
        let flex = 0.5 * (1.0 + (2.0 * PI * m.flex_cycles * s).sin()) * m.flex_depth;
        render(&self.hand, path_point(&m.right, s), path_point(&m.left, s), flex, spec.hand_size, 1.0)
    }

    /// Mean noise-free trajectory of a class over 16 phase points.
    pub fn class_mean_trajectory(&self, class: usize, spec: &GeneratorSpec) -> Vec<f64> {
        let n = 16;
        let slots = self.modules[class].len();
        let mut out = vec![0.0; n * COORDS];
        for slot in 0..slots {
            for k in 0..n {
                let f = self.base_frame(class, slot, k as f64 / (n - 1) as f64, spec);
                for (o, v) in out[k * COORDS..(k + 1) * COORDS].iter_mut().zip(f) {
                    *o += v / slots as f64;
                }
            }
        }
        out
    }

    /// Smallest RMS per-frame distance between class mean trajectories.
    pub fn min_class_distance(&self, spec: &GeneratorSpec) -> f64 {
        let means: Vec<Vec<f64>> = (0..NUM_CLASSES)
            .map(|c| self.class_mean_trajectory(c, spec))
            .collect();
        let mut best = f64::INFINITY;
        for a in 0..NUM_CLASSES {
            for b in a + 1..NUM_CLASSES {
                let sq: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum();
                best = best.min((sq / 16.0).sqrt());
            }
        }
        best
    }

    pub fn pattern(&self, class: usize) -> &[Agent] {
        &self.patterns[class]
    }
}

struct Writer<'a> {
    spec: &'a GeneratorSpec,
    op: &'a OperatorSpec,
    templates: &'a ClassTemplates,
    rng: ChaCha8Rng,
    noise: Normal<f64>,
    frames: Vec<LandmarkFrame>,
    labels: Vec<i32>,
    modules: Vec<ModuleSpan>,
    drift: f64,
}

impl Writer<'_> {
    fn push(&mut self, base: Vec<f64>, label: i32) {
        let s = self.op.hand_scale;
        let coords = base
            .into_iter()
            .map(|v| v * s + self.noise.sample(&mut self.rng) * s)
            .collect();
        let t = self.frames.len();
        self.frames.push(LandmarkFrame {
            frame_index: t,
            coords,
        });
        self.labels.push(label);
    }

    fn rest_frame(&mut self) -> Vec<f64> {
        self.drift += 0.15;
        let d = 0.01 * self.drift.sin();
        let r = [REST_RIGHT[0] + d, REST_RIGHT[1], REST_RIGHT[2]];
        let l = [REST_LEFT[0] - d, REST_LEFT[1], REST_LEFT[2]];
        render(&self.templates.hand, r, l, 0.1, self.spec.hand_size, 1.0)
    }

    fn scaled_len(&mut self, range: (usize, usize)) -> usize {
        let base = self.rng.random_range(range.0..=range.1) as f64;
        ((base / self.op.tempo).round() as usize).max(2)
    }

    fn idle(&mut self) {
        let n = self.rng.random_range(self.spec.idle_len.0..=self.spec.idle_len.1);
        for _ in 0..n {
            let f = self.rest_frame();
            self.push(f, NO_LABEL);
        }
    }

    fn robot(&mut self, class: usize) {
        let n = self.scaled_len(self.spec.robot_len);
        let start = self.frames.len();
        for _ in 0..n {
            let f = self.rest_frame();
            self.push(f, NO_LABEL);
        }
        self.modules.push(ModuleSpan {
            start,
            len: n,
            class,
            agent: Agent::Robot,
        });
    }

    fn human(&mut self, class: usize, slot: usize) {
        let n = self.scaled_len(self.spec.module_len);
        let m = &self.templates.modules[class][slot];
        let j = self.spec.waypoint_jitter;
        let jitter = |pts: &[[f64; 3]], rng: &mut ChaCha8Rng| -> Vec<[f64; 3]> {
            pts.iter()
                .map(|p| {
                    [
                        p[0] + j * rng.random_range(-1.0..1.0),
                        p[1] + j * rng.random_range(-1.0..1.0),
                        p[2] + 0.25 * j * rng.random_range(-1.0..1.0),
                    ]
                })
                .collect()
        };
        let right = jitter(&m.right, &mut self.rng);
        let left = jitter(&m.left, &mut self.rng);
        let phase = self.rng.random_range(-0.3..0.3);
        let (cycles, depth) = (m.flex_cycles, m.flex_depth);
        let start = self.frames.len();
        for k in 0..n {
            let s = k as f64 / (n - 1) as f64;
            let flex = 0.5 * (1.0 + (2.0 * PI * cycles * s + phase).sin()) * depth;
            let f = render(
                &self.templates.hand,
                path_point(&right, s),
                path_point(&left, s),
                flex,
                self.spec.hand_size,
                1.0,
            );
            self.push(f, class as i32);
        }
        self.modules.push(ModuleSpan {
            start,
            len: n,
            class,
            agent: Agent::Human,
        });
    }
}

/// Generates `n_assemblies` recordings of one operator. Every recording holds
/// all six sub-assemblies in a random order, separated by idle gaps.
pub fn synth_generate(
    spec: &GeneratorSpec,
    templates: &ClassTemplates,
    op: &OperatorSpec,
    n_assemblies: usize,
    first_assembly_id: u32,
    rng_seed: u64,
) -> Result<Vec<Recording>> {
    spec.validate()?;
    if !(op.hand_scale > 0.0 && op.tempo > 0.0 && op.noise_std >= 0.0) {
        return Err(Error::Config(format!(
            "operator {} needs positive scale and tempo and non-negative noise",
            op.operator_id
        )));
    }
    let noise = Normal::new(0.0, op.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    (0..n_assemblies)
        .map(|a| {
            let assembly_id = first_assembly_id + a as u32;
            let rng = ChaCha8Rng::seed_from_u64(seed::derive_indexed(
                rng_seed,
                "assembly",
                u64::from(assembly_id),
            ));
            let mut w = Writer {
                spec,
                op,
                templates,
                rng,
                noise,
                frames: Vec::new(),
                labels: Vec::new(),
                modules: Vec::new(),
                drift: 0.0,
            };
            let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
            order.shuffle(&mut w.rng);
            w.idle();
            for class in order {
                let mut slot = 0;
                for &agent in templates.pattern(class) {
                    match agent {
                        Agent::Human => {
                            w.human(class, slot);
                            slot += 1;
                        }
                        Agent::Robot => w.robot(class),
                    }
                    w.idle();
                }
            }
            Ok(Recording {
                assembly_id,
                operator_id: op.operator_id,
                frames: w.frames,
                labels: w.labels,
                modules: w.modules,
            })
        })
        .collect()
}

/// Number of assemblies to generate per operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationPlan {
    pub spec: GeneratorSpec,
    pub operators: Vec<OperatorSpec>,
    pub assemblies: Vec<usize>,
}

impl GenerationPlan {
    /// The four reference operators with `per_operator` assemblies each, plus
    /// `extra_first` more for operator 1.
    pub fn standard(per_operator: usize, extra_first: usize) -> Self {
        let operators = reference_operators();
        let mut assemblies = vec![per_operator; operators.len()];
        assemblies[0] += extra_first;
        Self {
            spec: GeneratorSpec::default(),
            operators,
            assemblies,
        }
    }
}

/// Generates every operator of `plan`, numbering assemblies from 1.
pub fn generate_dataset(plan: &GenerationPlan, seed: u64) -> Result<Dataset> {
    if plan.operators.len() != plan.assemblies.len() {
        return Err(Error::Config(
            "generation plan needs one assembly count per operator".into(),
        ));
    }
    let templates = ClassTemplates::new(&plan.spec)?;
    let mut recordings = Vec::new();
    let mut next_id = 1;
    for (op, &n) in plan.operators.iter().zip(&plan.assemblies) {
        let op_seed = seed::derive_indexed(seed, "operator", u64::from(op.operator_id));
        recordings.extend(synth_generate(&plan.spec, &templates, op, n, next_id, op_seed)?);
        next_id += n as u32;
    }
    Ok(Dataset { recordings })
}
