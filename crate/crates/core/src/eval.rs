//! Experiment harness: synthetic identity sets, model training, attack sweeps,
//! ablations, transfer and rotation-robustness checks, and the report fold.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{
    derive_seed, phase_shifting_attack, phase_superposition_attack, single_step_scan, Artifact, AttackConfig,
    AttackResult, Classifier, ShiftingContext, SuperpositionContext, Surrogate, SurrogateParams,
};
use crate::error::{Error, Result};
use crate::fringe::FringePatternSet;
use crate::geometry::rotation_y;
use crate::photometric::{fit_gamma, synth_face, FaceParams, GammaModel, RenderSettings, SceneSurface};
use crate::raster::Grid;
use crate::recognize::{
    goal_met, logit_gap, softmax, train, Architecture, AttackMode, ModelParams, Sample, TrainConfig, TrainReport,
};
use crate::reconstruct::{reconstruct_cloud, PointCloud, RigidTransform, TransformParams};
use crate::scan::{scan_with_basis, Rig, RigSpec, Scan};

/// Which scanner captures the face.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scanner {
    /// N-step phase shifting with gray-code unwrapping.
    MultiStep,
    /// One fringe capture through the quadrature estimator.
    SingleStep,
}

/// Attack family and, for superposition, whether the optimizer models the attacker gamma.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Shifting,
    Superposition,
    SuperpositionNoGamma,
}

impl Method {
    pub fn scanner(self) -> Scanner {
        match self {
            Method::Shifting => Scanner::MultiStep,
            _ => Scanner::SingleStep,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Shifting => "shifting",
            Method::Superposition => "superposition",
            Method::SuperpositionNoGamma => "superposition-no-gamma",
        }
    }
}

/// Everything needed to regenerate the synthetic identity set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub identities: usize,
    pub train_expressions: usize,
    pub validation_expressions: usize,
    pub expression_scale: f64,
    pub seed: u64,
    pub cloud_points: usize,
    pub rig: RigSpec,
    pub surrogate: SurrogateParams,
    /// True response of the attacker projector.
    pub attacker_gamma: f64,
    /// Sensor noise of the single-step verification captures.
    pub noise_sigma: f64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            identities: 40,
            train_expressions: 12,
            validation_expressions: 4,
            expression_scale: 1.0,
            seed: 0,
            cloud_points: 256,
            rig: RigSpec::desk(),
            surrogate: SurrogateParams::default(),
            attacker_gamma: 2.5,
            noise_sigma: 0.005,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(Error::InvalidConfig("need at least two identities".into()));
        }
        if self.train_expressions == 0 {
            return Err(Error::InvalidConfig("need at least one training expression".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("noise sigma must be non-negative".into()));
        }
        GammaModel::new(self.attacker_gamma)?;
        Ok(())
    }
}

/// Face seed of identity `label` in the set generated from `seed`.
pub fn identity_seed(seed: u64, label: usize) -> u64 {
    derive_seed(seed, 1, label as u64)
}

/// Face `label` of the set described by `spec`, seen by `rig`'s camera.
pub fn synth_scene(spec: &BenchSpec, rig: &Rig, label: usize, expression: u64) -> Result<SceneSurface> {
    let params = FaceParams {
        width: rig.camera_width,
        height: rig.camera_height,
        standoff: rig.standoff,
        expression,
        expression_scale: spec.expression_scale,
        ..Default::default()
    };
    synth_face(identity_seed(spec.seed, label), &params, &rig.camera)
}

/// Built rig, patterns and estimator shared by every instance of a sweep.
#[derive(Clone, Debug)]
pub struct Bench {
    pub spec: BenchSpec,
    pub rig: Rig,
    pub patterns: FringePatternSet,
    pub surrogate: Surrogate,
    pub scanner_settings: RenderSettings,
}

impl Bench {
    pub fn new(spec: BenchSpec) -> Result<Self> {
        spec.validate()?;
        let rig = spec.rig.build()?;
        let patterns = rig.patterns();
        let carrier = crate::attack::reference_carrier(&rig);
        let surrogate = Surrogate::new(&carrier, rig.fringe_count, spec.surrogate)?;
        Ok(Self { spec, rig, patterns, surrogate, scanner_settings: RenderSettings::default() })
    }

    pub fn identity_seed(&self, label: usize) -> u64 {
        identity_seed(self.spec.seed, label)
    }

    /// Expression seed of training/validation capture `k` (0 is the neutral face).
    pub fn expression(&self, label: usize, k: usize) -> u64 {
        if k == 0 {
            0
        } else {
            derive_seed(self.spec.seed, 3, (label * 1000 + k) as u64) | 1
        }
    }

    /// Expression of the held-out face that gets attacked.
    pub fn test_expression(&self, label: usize) -> u64 {
        derive_seed(self.spec.seed, 4, label as u64) | 1
    }

    pub fn scene(&self, label: usize, expression: u64) -> Result<SceneSurface> {
        synth_scene(&self.spec, &self.rig, label, expression)
    }

    pub fn test_scene(&self, label: usize) -> Result<SceneSurface> {
        self.scene(label, self.test_expression(label))
    }

    /// Capture settings of the single-step scanner with the attacker projector present.
    pub fn attack_settings(&self, noise_seed: u64) -> RenderSettings {
        RenderSettings {
            attacker_gamma: Some(GammaModel::new(self.spec.attacker_gamma).expect("validated")),
            noise_sigma: self.spec.noise_sigma,
            noise_seed,
            ..self.scanner_settings.clone()
        }
    }

    /// Attacker-side gamma estimate from a 17-level sweep of the attacker
    /// projector, read back with uniform noise of half-width `noise_sigma`.
    pub fn calibrated_gamma(&self, seed: u64) -> Result<GammaModel> {
        let truth = GammaModel::new(self.spec.attacker_gamma)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 13, 0));
        let h = self.spec.noise_sigma;
        let samples: Vec<(f64, f64)> = (0..=16)
            .map(|k| {
                let u = k as f64 / 16.0;
                let noise = if h > 0.0 { rng.gen_range(-h..=h) } else { 0.0 };
                (u, truth.apply(u) + noise)
            })
            .collect();
        Ok(fit_gamma(&samples)?.model)
    }

    /// Clean capture; `noise_seed` is `None` for a noiseless capture.
    pub fn capture(&self, scene: &SceneSurface, scanner: Scanner, noise_seed: Option<u64>) -> Result<Scan> {
        let basis = self.rig.basis(scene);
        match scanner {
            Scanner::MultiStep => scan_with_basis(&basis, &self.patterns, None, &self.scanner_settings),
            Scanner::SingleStep => {
                let mut settings = self.attack_settings(noise_seed.unwrap_or(0));
                if noise_seed.is_none() {
                    settings.noise_sigma = 0.0;
                }
                let dark = Grid::filled(self.rig.camera_width, self.rig.camera_height, 0.0);
                single_step_scan(&basis, &self.patterns, &self.surrogate, Some(&dark), &settings)
            }
        }
    }

    pub fn cloud(&self, scan: &Scan) -> Result<PointCloud> {
        Ok(reconstruct_cloud(scan.absolute(), &self.rig.camera, &self.rig.projector, self.rig.projector_width)?.cloud)
    }

    pub fn classifier<'a>(&'a self, model: &'a ModelParams) -> Result<Classifier<'a>> {
        Classifier::new(model, &self.rig.camera, self.rig.camera_width, self.rig.camera_height, self.spec.cloud_points)
    }

    /// An untrained model of the given architecture sized for this bench.
    pub fn blank_model(&self, architecture: Architecture, seed: u64) -> Result<ModelParams> {
        let mut model = match architecture {
            Architecture::PointMlp => ModelParams::point_mlp(self.spec.identities, seed)?,
            Architecture::DepthConv => {
                ModelParams::depth_conv(self.spec.identities, [self.rig.camera_width, self.rig.camera_height], seed)?
            }
        };
        model.class_names = (0..self.spec.identities).map(|c| format!("id{c:03}")).collect();
        Ok(model)
    }

    /// Noiseless training and validation samples, one capture per expression.
    pub fn dataset(&self, architecture: Architecture, scanner: Scanner) -> Result<(Vec<Sample>, Vec<Sample>)> {
        let blank = self.blank_model(architecture, 0)?;
        let classifier = self.classifier(&blank)?;
        let per = self.spec.train_expressions + self.spec.validation_expressions;
        let samples: Vec<Vec<(bool, Sample)>> = (0..self.spec.identities)
            .into_par_iter()
            .map(|label| {
                (0..per)
                    .map(|k| {
                        let scene = self.scene(label, self.expression(label, k))?;
                        let cloud = self.cloud(&self.capture(&scene, scanner, None)?)?;
                        let seed = derive_seed(self.spec.seed, 5, (label * 1000 + k) as u64);
                        let input = classifier.model_input(&cloud, seed, None)?;
                        Ok((k < self.spec.train_expressions, Sample { input, label }))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let (mut train_set, mut validation) = (Vec::new(), Vec::new());
        for (is_train, sample) in samples.into_iter().flatten() {
            if is_train {
                train_set.push(sample);
            } else {
                validation.push(sample);
            }
        }
        Ok((train_set, validation))
    }

    pub fn train_model(
        &self,
        architecture: Architecture,
        scanner: Scanner,
        config: &TrainConfig,
    ) -> Result<(ModelParams, TrainReport)> {
        let (train_set, validation) = self.dataset(architecture, scanner)?;
        train(self.blank_model(architecture, config.seed)?, &train_set, &validation, config)
    }

    /// Fraction of held-out test faces the model labels correctly.
    pub fn natural_accuracy(&self, model: &ModelParams, scanner: Scanner, labels: &[usize]) -> Result<f64> {
        let correct = labels
            .par_iter()
            .map(|&label| self.clean_prediction(model, scanner, label).map(|p| p == label))
            .collect::<Result<Vec<bool>>>()?;
        Ok(correct.iter().filter(|&&c| c).count() as f64 / labels.len().max(1) as f64)
    }

    /// Predicted label of the held-out face in the same capture conditions the attack verifies against.
    pub fn clean_prediction(&self, model: &ModelParams, scanner: Scanner, label: usize) -> Result<usize> {
        let scene = self.test_scene(label)?;
        let noise = (scanner == Scanner::SingleStep).then_some(0);
        let cloud = self.cloud(&self.capture(&scene, scanner, noise)?)?;
        let logits = self.classifier(model)?.classify_cloud(&cloud, 0, None)?;
        Ok(crate::recognize::argmax(&logits))
    }
}

/// Ablation switches recorded with every instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Flags {
    pub direction_constraint: bool,
    pub renormalize_in_loop: bool,
    pub tiv: bool,
    pub sensitivity_l1: bool,
}

impl Flags {
    pub fn of(config: &AttackConfig) -> Self {
        Self {
            direction_constraint: config.direction_constraint,
            renormalize_in_loop: config.renormalize_in_loop,
            tiv: config.tiv,
            sensitivity_l1: config.distance == crate::attack::Distance::SensitivityL1,
        }
    }

    pub fn apply(&self, config: &mut AttackConfig) {
        config.direction_constraint = self.direction_constraint;
        config.renormalize_in_loop = self.renormalize_in_loop;
        config.tiv = self.tiv;
        config.distance =
            if self.sensitivity_l1 { crate::attack::Distance::SensitivityL1 } else { crate::attack::Distance::L2 };
    }

    pub fn full() -> Self {
        Self { direction_constraint: true, renormalize_in_loop: true, tiv: true, sensitivity_l1: true }
    }

    /// Direction constraint, renormalization and 3D-TI all off: the naive L1 attack.
    pub fn naive() -> Self {
        Self { direction_constraint: false, renormalize_in_loop: false, tiv: false, sensitivity_l1: true }
    }

    pub fn label(&self) -> String {
        let bit = |b: bool, s: &str| if b { s.to_string() } else { "-".to_string() };
        format!(
            "{}{}{}{}",
            bit(self.direction_constraint, "D"),
            bit(self.renormalize_in_loop, "N"),
            bit(self.tiv, "T"),
            if self.sensitivity_l1 { "s" } else { "2" }
        )
    }
}

/// One attack to run: face `label`, method and fully resolved config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub index: usize,
    pub label: usize,
    pub method: Method,
    pub config: AttackConfig,
}

/// Instances over labels `0..count` (wrapping over identities) with per-index
/// seeds and, for impersonation, uniformly drawn targets other than the true label.
pub fn instance_specs(
    bench: &Bench,
    method: Method,
    mode: AttackMode,
    count: usize,
    base: &AttackConfig,
) -> Vec<InstanceSpec> {
    let n = bench.spec.identities;
    (0..count)
        .map(|index| {
            let label = index % n;
            let mut config = base.clone();
            config.mode = mode;
            config.seed = derive_seed(base.seed, 6, index as u64);
            config.target = match mode {
                AttackMode::Dodge => None,
                AttackMode::Impersonate => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base.seed, 7, index as u64));
                    let t = rng.gen_range(0..n - 1);
                    Some(if t >= label { t + 1 } else { t })
                }
            };
            InstanceSpec { index, label, method, config }
        })
        .collect()
}

/// Test-time transform family for robustness checks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum RobustnessTest {
    /// Gaussian rotation about every axis plus Gaussian translation.
    Gaussian { transform: TransformParams, samples: usize },
    /// Rotation about the vertical axis drawn uniformly from `[-max, max]` radians.
    UniformYaw { max: f64, samples: usize },
}

impl RobustnessTest {
    pub fn sigma_five_degrees(samples: usize) -> Self {
        Self::Gaussian { transform: TransformParams::default_sampling(), samples }
    }

    pub fn yaw_ten_degrees(samples: usize) -> Self {
        Self::UniformYaw { max: 10f64.to_radians(), samples }
    }

    pub fn transforms(&self, seed: u64) -> Vec<RigidTransform> {
        match *self {
            RobustnessTest::Gaussian { transform, samples } => {
                (0..samples).map(|k| transform.sample(derive_seed(seed, 8, k as u64))).collect()
            }
            RobustnessTest::UniformYaw { max, samples } => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 9, 0));
                (0..samples)
                    .map(|_| RigidTransform { rotation: rotation_y(rng.gen_range(-max..=max)), translation: Vector3::zeros() })
                    .collect()
            }
        }
    }
}

/// Outcome of one adversarial cloud under a family of test transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Robustness {
    pub samples: usize,
    pub successes: usize,
    /// Mean softmax of the target (impersonation) or of "not the true label" (dodging).
    pub mean_goal_probability: f64,
}

pub fn robustness(
    classifier: &Classifier,
    cloud: &PointCloud,
    label: usize,
    config: &AttackConfig,
    test: &RobustnessTest,
) -> Result<Robustness> {
    let goal = config.loss_label(label)?;
    let eval_seed = derive_seed(config.seed, 10, 0);
    let transforms = test.transforms(derive_seed(config.seed, 11, 0));
    let mut successes = 0;
    let mut prob = 0.0;
    for t in &transforms {
        let logits = classifier.classify_cloud(cloud, eval_seed, Some(*t))?;
        if goal_met(logit_gap(&logits, goal, config.mode)) {
            successes += 1;
        }
        let p = softmax(&logits);
        prob += match config.mode {
            AttackMode::Impersonate => p[goal],
            AttackMode::Dodge => 1.0 - p[goal],
        };
    }
    Ok(Robustness {
        samples: transforms.len(),
        successes,
        mean_goal_probability: prob / transforms.len().max(1) as f64,
    })
}

/// Per-instance result row; the report is a pure fold over these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub index: usize,
    pub label: usize,
    pub target: Option<usize>,
    pub method: Method,
    pub mode: AttackMode,
    pub flags: Flags,
    pub seed: u64,
    /// The clean capture was already labelled correctly.
    pub natural_correct: bool,
    pub success: bool,
    /// Independent re-simulation of the stored artifact.
    pub reverified: bool,
    pub surrogate_success: bool,
    pub margin: f64,
    pub rmse: f64,
    pub mean_distance: f64,
    pub l1: f64,
    pub lambda: Option<f64>,
    pub iterations: usize,
    pub robustness: Option<Robustness>,
    pub error: Option<String>,
}

impl InstanceRecord {
    fn failed(spec: &InstanceSpec, error: String) -> Self {
        Self {
            index: spec.index,
            label: spec.label,
            target: spec.config.target,
            method: spec.method,
            mode: spec.config.mode,
            flags: Flags::of(&spec.config),
            seed: spec.config.seed,
            natural_correct: false,
            success: false,
            reverified: false,
            surrogate_success: false,
            margin: 0.0,
            rmse: 0.0,
            mean_distance: 0.0,
            l1: 0.0,
            lambda: None,
            iterations: 0,
            robustness: None,
            error: Some(error),
        }
    }

    /// Perturbation size for paired comparisons; failures count as infinite.
    pub fn paired_l1(&self) -> f64 {
        if self.success {
            self.l1
        } else {
            f64::INFINITY
        }
    }
}

/// A finished instance: its record plus the in-memory artifact.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub spec: InstanceSpec,
    pub record: InstanceRecord,
    pub result: Option<AttackResult>,
}

/// Runs one attack against its held-out face; errors become failed records.
pub fn run_instance(bench: &Bench, model: &ModelParams, spec: &InstanceSpec, test: Option<&RobustnessTest>) -> Outcome {
    match try_instance(bench, model, spec, test) {
        Ok((record, result)) => Outcome { spec: spec.clone(), record, result: Some(result) },
        Err(e) => Outcome { spec: spec.clone(), record: InstanceRecord::failed(spec, e.to_string()), result: None },
    }
}

fn try_instance(
    bench: &Bench,
    model: &ModelParams,
    spec: &InstanceSpec,
    test: Option<&RobustnessTest>,
) -> Result<(InstanceRecord, AttackResult)> {
    let scene = bench.test_scene(spec.label)?;
    let basis = bench.rig.basis(&scene);
    let clean = scan_with_basis(&basis, &bench.patterns, None, &bench.scanner_settings)?;
    let result = match spec.method {
        Method::Shifting => {
            let ctx = ShiftingContext {
                rig: &bench.rig,
                basis: &basis,
                patterns: &bench.patterns,
                settings: &bench.scanner_settings,
                clean: &clean,
            };
            phase_shifting_attack(&ctx, model, spec.label, &spec.config)?
        }
        Method::Superposition | Method::SuperpositionNoGamma => {
            let settings = bench.attack_settings(spec.config.seed);
            let ctx = SuperpositionContext {
                rig: &bench.rig,
                basis: &basis,
                patterns: &bench.patterns,
                clean: &clean,
                surrogate: &bench.surrogate,
                settings: &settings,
                model_gamma: match spec.method {
                    Method::Superposition => Some(bench.calibrated_gamma(spec.config.seed)?),
                    _ => None,
                },
            };
            phase_superposition_attack(&ctx, model, spec.label, &spec.config)?
        }
    };
    let classifier = bench.classifier(model)?;
    let natural_correct = crate::recognize::argmax(&classifier.classify_cloud(&result.clean_cloud, 0, None)?) == spec.label;
    let reverified = reverify(bench, model, spec, &result.artifact)?;
    let robustness = match test {
        Some(t) => Some(robustness(&classifier, &result.adversarial_cloud, spec.label, &spec.config, t)?),
        None => None,
    };
    let record = InstanceRecord {
        index: spec.index,
        label: spec.label,
        target: spec.config.target,
        method: spec.method,
        mode: spec.config.mode,
        flags: Flags::of(&spec.config),
        seed: spec.config.seed,
        natural_correct,
        success: result.success,
        reverified,
        surrogate_success: result.surrogate_success,
        margin: result.margin,
        rmse: result.rmse.rmse,
        mean_distance: result.rmse.mean_distance,
        l1: result.l1,
        lambda: result.lambda,
        iterations: result.iterations,
        robustness,
        error: None,
    };
    Ok((record, result))
}

/// Second, independent physical check of an artifact: fresh scene, fresh
/// capture through the artifact, fresh reconstruction and classification.
pub fn reverify(bench: &Bench, model: &ModelParams, spec: &InstanceSpec, artifact: &Artifact) -> Result<bool> {
    let scene = bench.test_scene(spec.label)?;
    let basis = bench.rig.basis(&scene);
    let scan = match artifact {
        Artifact::Patterns(patterns) => scan_with_basis(&basis, patterns, None, &bench.scanner_settings)?,
        Artifact::Illumination(x) => {
            single_step_scan(&basis, &bench.patterns, &bench.surrogate, Some(x), &bench.attack_settings(spec.config.seed))?
        }
    };
    let cloud = bench.cloud(&scan)?;
    let logits = bench.classifier(model)?.classify_cloud(&cloud, derive_seed(spec.config.seed, 10, 0), None)?;
    let goal = spec.config.loss_label(spec.label)?;
    Ok(goal_met(logit_gap(&logits, goal, spec.config.mode)))
}

/// Runs instances concurrently on the current rayon pool; output order follows `specs`.
pub fn run_instances(
    bench: &Bench,
    model: &ModelParams,
    specs: &[InstanceSpec],
    test: Option<&RobustnessTest>,
) -> Vec<Outcome> {
    specs.par_iter().map(|s| run_instance(bench, model, s, test)).collect()
}

/// Aggregate over one (method, mode, flags) group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub method: Method,
    pub mode: AttackMode,
    pub flags: Flags,
    pub attempts: usize,
    pub errors: usize,
    pub successes: usize,
    pub reverified_successes: usize,
    pub surrogate_successes: usize,
    pub natural_errors: usize,
    pub asr: f64,
    pub surrogate_asr: f64,
    pub mean_rmse: f64,
    pub mean_distance: f64,
    pub median_l1: Option<f64>,
    pub mean_l1: Option<f64>,
    pub robust_samples: usize,
    pub robust_successes: usize,
    pub robust_asr: Option<f64>,
    pub mean_goal_probability: Option<f64>,
}

/// Aggregated sweep. Runtime is kept out so reports stay byte-stable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub instances: usize,
    pub seeds: Vec<u64>,
    pub groups: BTreeMap<String, GroupSummary>,
    /// Attack-time and report-time verification agree on every instance.
    pub double_entry_agrees: bool,
}

impl ExperimentReport {
    pub fn group(&self, method: Method, mode: AttackMode, flags: Flags) -> Option<&GroupSummary> {
        self.groups.get(&group_key(method, mode, flags))
    }
}

pub fn group_key(method: Method, mode: AttackMode, flags: Flags) -> String {
    let mode = match mode {
        AttackMode::Dodge => "dodge",
        AttackMode::Impersonate => "impersonate",
    };
    format!("{}/{}/{}", method.name(), mode, flags.label())
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Pure fold over records: same records in, same report out.
pub fn fold_report(records: &[InstanceRecord]) -> ExperimentReport {
    let mut by_key: BTreeMap<String, Vec<&InstanceRecord>> = BTreeMap::new();
    for r in records {
        by_key.entry(group_key(r.method, r.mode, r.flags)).or_default().push(r);
    }
    let groups = by_key
        .into_iter()
        .map(|(key, rs)| {
            let first = rs[0];
            let attempts = rs.len();
            let ok: Vec<&&InstanceRecord> = rs.iter().filter(|r| r.error.is_none()).collect();
            let successes = rs.iter().filter(|r| r.success).count();
            let succ_l1: Vec<f64> = rs.iter().filter(|r| r.success).map(|r| r.l1).collect();
            let robust: Vec<&Robustness> = rs.iter().filter_map(|r| r.robustness.as_ref()).collect();
            let robust_samples: usize = robust.iter().map(|r| r.samples).sum();
            let robust_successes: usize = robust.iter().map(|r| r.successes).sum();
            let mean = |f: &dyn Fn(&InstanceRecord) -> f64| {
                if ok.is_empty() {
                    0.0
                } else {
                    ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
                }
            };
            let summary = GroupSummary {
                method: first.method,
                mode: first.mode,
                flags: first.flags,
                attempts,
                errors: attempts - ok.len(),
                successes,
                reverified_successes: rs.iter().filter(|r| r.reverified).count(),
                surrogate_successes: rs.iter().filter(|r| r.surrogate_success).count(),
                natural_errors: ok.iter().filter(|r| !r.natural_correct).count(),
                asr: successes as f64 / attempts as f64,
                surrogate_asr: rs.iter().filter(|r| r.surrogate_success).count() as f64 / attempts as f64,
                mean_rmse: mean(&|r| r.rmse),
                mean_distance: mean(&|r| r.mean_distance),
                mean_l1: (!succ_l1.is_empty()).then(|| succ_l1.iter().sum::<f64>() / succ_l1.len() as f64),
                median_l1: median(succ_l1),
                robust_samples,
                robust_successes,
                robust_asr: (robust_samples > 0).then(|| robust_successes as f64 / robust_samples as f64),
                mean_goal_probability: (!robust.is_empty())
                    .then(|| robust.iter().map(|r| r.mean_goal_probability).sum::<f64>() / robust.len() as f64),
            };
            (key, summary)
        })
        .collect();
    let mut seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    ExperimentReport {
        instances: records.len(),
        seeds,
        groups,
        double_entry_agrees: records.iter().all(|r| r.success == r.reverified),
    }
}

/// Runs the given instance specs and folds them.
pub fn run_benchmark(
    bench: &Bench,
    model: &ModelParams,
    specs: &[InstanceSpec],
    test: Option<&RobustnessTest>,
) -> (ExperimentReport, Vec<Outcome>) {
    let outcomes = run_instances(bench, model, specs, test);
    let records: Vec<InstanceRecord> = outcomes.iter().map(|o| o.record.clone()).collect();
    (fold_report(&records), outcomes)
}

/// The same instances once per flag combination; one report group per combination.
pub fn ablation(
    bench: &Bench,
    model: &ModelParams,
    flag_sets: &[Flags],
    specs: &[InstanceSpec],
    test: Option<&RobustnessTest>,
) -> (ExperimentReport, Vec<Outcome>) {
    let all: Vec<InstanceSpec> = flag_sets
        .iter()
        .flat_map(|flags| {
            specs.iter().map(move |s| {
                let mut s = s.clone();
                flags.apply(&mut s.config);
                s
            })
        })
        .collect();
    run_benchmark(bench, model, &all, test)
}

/// Shadow-by-victim dodging success: row = model the attack was built on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub models: Vec<String>,
    pub asr: Vec<Vec<f64>>,
}

/// Builds attacks on each shadow model and scores the re-simulated clouds on every victim.
pub fn transfer_matrix(
    bench: &Bench,
    models: &[(String, ModelParams)],
    specs: &[InstanceSpec],
) -> Result<TransferMatrix> {
    if models.len() < 2 {
        return Err(Error::InvalidConfig("transfer needs at least two models".into()));
    }
    let mut asr = Vec::with_capacity(models.len());
    for (_, shadow) in models {
        let outcomes = run_instances(bench, shadow, specs, None);
        let mut row = Vec::with_capacity(models.len());
        for (_, victim) in models {
            let classifier = bench.classifier(victim)?;
            let mut hits = 0;
            for o in &outcomes {
                let hit = match &o.result {
                    None => false,
                    Some(_) if std::ptr::eq(victim, shadow) => o.record.success,
                    Some(r) => {
                        let goal = o.spec.config.loss_label(o.spec.label)?;
                        let logits =
                            classifier.classify_cloud(&r.adversarial_cloud, derive_seed(o.spec.config.seed, 10, 0), None)?;
                        goal_met(logit_gap(&logits, goal, o.spec.config.mode))
                    }
                };
                hits += hit as usize;
            }
            row.push(hits as f64 / outcomes.len().max(1) as f64);
        }
        asr.push(row);
    }
    Ok(TransferMatrix { models: models.iter().map(|(n, _)| n.clone()).collect(), asr })
}

/// Fraction of paired instances where `ours` perturbs strictly less than `baseline`
/// (a failed attack counts as an infinite perturbation).
pub fn paired_fraction_below(ours: &[InstanceRecord], baseline: &[InstanceRecord]) -> Result<f64> {
    if ours.len() != baseline.len() || ours.is_empty() {
        return Err(Error::ShapeMismatch("paired comparison needs equal, non-empty instance lists".into()));
    }
    let mut wins = 0;
    for (a, b) in ours.iter().zip(baseline) {
        if a.index != b.index || a.label != b.label {
            return Err(Error::ShapeMismatch(format!("instance {} is not paired with {}", a.index, b.index)));
        }
        if a.paired_l1() < b.paired_l1() {
            wins += 1;
        }
    }
    Ok(wins as f64 / ours.len() as f64)
}

/// Multiplies RMSE by 10 for table rendering; stored reports keep raw values.
pub fn display_rmse(rmse: f64) -> f64 {
    10.0 * rmse
}

/// Report groups as CSV, one row per group.
pub fn report_csv(report: &ExperimentReport) -> String {
    let mut out = String::from(
        "group,attempts,errors,successes,reverified,asr,surrogate_asr,mean_rmse_x10,mean_distance,median_l1,robust_asr,mean_goal_probability\n",
    );
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for (key, g) in &report.groups {
        out.push_str(&format!(
            "{key},{},{},{},{},{},{},{},{},{},{},{}\n",
            g.attempts,
            g.errors,
            g.successes,
            g.reverified_successes,
            g.asr,
            g.surrogate_asr,
            display_rmse(g.mean_rmse),
            g.mean_distance,
            opt(g.median_l1),
            opt(g.robust_asr),
            opt(g.mean_goal_probability),
        ));
    }
    out
}

/// Angles in degrees, for logs.
pub fn degrees(rad: f64) -> f64 {
    rad * 180.0 / PI
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(index: usize, success: bool, l1: f64) -> InstanceRecord {
        InstanceRecord {
            index,
            label: index,
            target: None,
            method: Method::Shifting,
            mode: AttackMode::Dodge,
            flags: Flags::full(),
            seed: index as u64,
            natural_correct: true,
            success,
            reverified: success,
            surrogate_success: success,
            margin: if success { -31.0 } else { 3.0 },
            rmse: 0.001 * index as f64,
            mean_distance: 0.01,
            l1,
            lambda: Some(1.0),
            iterations: 10,
            robustness: None,
            error: None,
        }
    }

    #[test]
    fn fold_counts_and_asr() {
        let rs = vec![record(0, true, 1.0), record(1, false, 5.0), record(2, true, 3.0), record(3, true, 2.0)];
        let report = fold_report(&rs);
        let g = report.group(Method::Shifting, AttackMode::Dodge, Flags::full()).unwrap();
        assert_eq!((g.attempts, g.successes, g.reverified_successes), (4, 3, 3));
        assert_eq!(g.asr, 0.75);
        assert_eq!(g.median_l1, Some(2.0));
        assert!(report.double_entry_agrees);
    }

    #[test]
    fn double_entry_disagreement_is_reported() {
        let mut r = record(0, true, 1.0);
        r.reverified = false;
        assert!(!fold_report(&[r]).double_entry_agrees);
    }

    #[test]
    fn paired_comparison_treats_failures_as_infinite() {
        let ours = vec![record(0, true, 1.0), record(1, true, 4.0), record(2, false, 0.1)];
        let base = vec![record(0, true, 2.0), record(1, false, 1.0), record(2, false, 0.1)];
        assert!((paired_fraction_below(&ours, &base).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(paired_fraction_below(&ours[..1], &base).is_err());
    }

    #[test]
    fn impersonation_targets_exclude_true_label() {
        let bench = Bench::new(BenchSpec { identities: 5, ..Default::default() }).unwrap();
        let specs = instance_specs(&bench, Method::Shifting, AttackMode::Impersonate, 50, &AttackConfig::default());
        assert!(specs.iter().all(|s| s.config.target.is_some_and(|t| t != s.label && t < 5)));
        let again = instance_specs(&bench, Method::Shifting, AttackMode::Impersonate, 50, &AttackConfig::default());
        assert_eq!(specs, again);
        let distinct: std::collections::BTreeSet<usize> = specs.iter().filter_map(|s| s.config.target).collect();
        assert!(distinct.len() >= 4);
    }

    #[test]
    fn yaw_samples_stay_in_range() {
        let test = RobustnessTest::yaw_ten_degrees(200);
        for t in test.transforms(3) {
            let angle = t.rotation[(0, 2)].atan2(t.rotation[(0, 0)]);
            assert!(degrees(angle).abs() <= 10.0 + 1e-9);
            assert_eq!(t.translation, Vector3::zeros());
        }
    }

    #[test]
    fn flags_round_trip_through_config() {
        for bits in 0..16u8 {
            let flags = Flags {
                direction_constraint: bits & 1 != 0,
                renormalize_in_loop: bits & 2 != 0,
                tiv: bits & 4 != 0,
                sensitivity_l1: bits & 8 != 0,
            };
            let mut config = AttackConfig::default();
            flags.apply(&mut config);
            assert_eq!(Flags::of(&config), flags);
        }
    }

    proptest! {
        #[test]
        fn fold_survives_serialization(successes in proptest::collection::vec(any::<bool>(), 1..20),
                                       l1 in proptest::collection::vec(0.0f64..10.0, 20)) {
            let rs: Vec<InstanceRecord> = successes.iter().enumerate().map(|(i, &s)| record(i, s, l1[i])).collect();
            let json = serde_json::to_string(&rs).unwrap();
            let back: Vec<InstanceRecord> = serde_json::from_str(&json).unwrap();
            let a = serde_json::to_string(&fold_report(&rs)).unwrap();
            let b = serde_json::to_string(&fold_report(&back)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn asr_is_a_fraction(successes in proptest::collection::vec(any::<bool>(), 1..30)) {
            let rs: Vec<InstanceRecord> = successes.iter().enumerate().map(|(i, &s)| record(i, s, 1.0)).collect();
            for g in fold_report(&rs).groups.values() {
                prop_assert!((0.0..=1.0).contains(&g.asr));
                prop_assert_eq!(g.successes, successes.iter().filter(|&&s| s).count());
            }
        }
    }
}
