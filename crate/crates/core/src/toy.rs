//! Desk-scale distillation experiment.
//!
//! A synthetic world of places in a low-dimensional latent space is observed
//! through two noisy "modalities" (random Fourier-feature maps of the latent
//! position plus Gaussian noise). The teacher is a fixed random projection of
//! both noise-free modality features, so it sees more than any single-modality
//! student can. A one-hidden-layer student reads modality A and is trained by
//! full-batch gradient descent on the triplet loss plus the selected
//! distillation terms; retrieval is evaluated on held-out query/database rows.

use crate::error::{Error, Result};
use crate::numeric::{seeded_rng, Matrix, RngStream};
use crate::relational::{
    combine_objective, kd_c_loss, kd_s_loss, DistillConfig, LossValue, Variant,
};
use crate::vpr::{evaluate, triplet_loss, GroundTruth, RecallReport, TripletConfig, DEFAULT_K_MAX};

/// Angular frequency scale of the random Fourier features.
const FEATURE_FREQUENCY: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub num_places: usize,
    pub samples_per_place: usize,
    pub latent_dim: usize,
    pub modality_dims: (usize, usize),
    pub teacher_dim: usize,
    /// Per-coordinate noise added to each modality descriptor.
    pub noise_sigma: f64,
    /// Spread of sample positions around their place centre.
    pub place_spread: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_places: 32,
            samples_per_place: 8,
            latent_dim: 2,
            modality_dims: (16, 16),
            teacher_dim: 16,
            noise_sigma: 0.4,
            place_spread: 0.02,
            seed: 0,
        }
    }
}

impl SceneConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_places < 4 {
            return bad(format!("num_places = {} must be >= 4", self.num_places));
        }
        if self.samples_per_place < 4 {
            // The round-robin split needs four samples per place to give every
            // place a query row.
            return bad(format!(
                "samples_per_place = {} must be >= 4 so every place has a query",
                self.samples_per_place
            ));
        }
        if self.latent_dim == 0 || self.modality_dims.0 == 0 || self.modality_dims.1 == 0 || self.teacher_dim == 0 {
            return bad("latent, modality and teacher dimensions must be >= 1".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma = {} must be >= 0", self.noise_sigma));
        }
        if !(self.place_spread.is_finite() && self.place_spread >= 0.0) {
            return bad(format!("place_spread = {} must be >= 0", self.place_spread));
        }
        Ok(())
    }
}

/// Random Fourier-feature map `z -> sin(z W + b)`.
#[derive(Debug, Clone, PartialEq)]
struct FeatureMap {
    weight: Matrix,
    phase: Vec<f64>,
}

impl FeatureMap {
    fn sample(rng: &mut RngStream, latent_dim: usize, out_dim: usize) -> Self {
        let weight = rng.normal_matrix(latent_dim, out_dim, FEATURE_FREQUENCY);
        let phase = (0..out_dim)
            .map(|_| rng.uniform_range(-std::f64::consts::PI, std::f64::consts::PI))
            .collect();
        Self { weight, phase }
    }

    fn apply(&self, latents: &Matrix) -> Matrix {
        let mut out = latents.matmul(&self.weight).expect("latent dim checked");
        for i in 0..out.rows() {
            for (v, b) in out.row_mut(i).iter_mut().zip(&self.phase) {
                *v = (*v + b).sin();
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub latents: Matrix,
    /// Noisy modality-A descriptors (the student's input).
    pub modality_a: Matrix,
    /// Noisy modality-B descriptors.
    pub modality_b: Matrix,
    /// Fused teacher descriptors built from noise-free features.
    pub teacher: Matrix,
    pub labels: Vec<usize>,
    pub train: Vec<usize>,
    pub database: Vec<usize>,
    pub query: Vec<usize>,
}

impl SyntheticScene {
    pub fn train_labels(&self) -> Vec<usize> {
        self.train.iter().map(|&i| self.labels[i]).collect()
    }

    /// Database rows sharing each query's place.
    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth::new(
            self.query
                .iter()
                .map(|&q| {
                    self.database
                        .iter()
                        .enumerate()
                        .filter(|(_, &d)| self.labels[d] == self.labels[q])
                        .map(|(k, _)| k)
                        .collect()
                })
                .collect(),
        )
    }
}

/// Role of the `k`-th sample of a place: positions 0 and 2 of every block of
/// four train, 1 goes to the database and 3 to the queries.
fn split_role(k: usize) -> usize {
    match k % 4 {
        0 | 2 => 0,
        1 => 1,
        _ => 2,
    }
}

pub fn gen_scene(cfg: &SceneConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    let (ca, cb) = cfg.modality_dims;
    let map_a = FeatureMap::sample(&mut rng, cfg.latent_dim, ca);
    let map_b = FeatureMap::sample(&mut rng, cfg.latent_dim, cb);
    let fusion = rng.normal_matrix(ca + cb, cfg.teacher_dim, 1.0 / ((ca + cb) as f64).sqrt());

    let centres = Matrix::from_vec(
        cfg.num_places,
        cfg.latent_dim,
        (0..cfg.num_places * cfg.latent_dim).map(|_| rng.uniform()).collect(),
    )?;

    let total = cfg.num_places * cfg.samples_per_place;
    let mut latents = Matrix::zeros(total, cfg.latent_dim);
    let mut labels = Vec::with_capacity(total);
    let (mut train, mut database, mut query) = (Vec::new(), Vec::new(), Vec::new());
    for p in 0..cfg.num_places {
        for k in 0..cfg.samples_per_place {
            let idx = p * cfg.samples_per_place + k;
            for (d, c) in latents.row_mut(idx).iter_mut().zip(centres.row(p)) {
                *d = c + cfg.place_spread * rng.normal();
            }
            labels.push(p);
            match split_role(k) {
                0 => train.push(idx),
                1 => database.push(idx),
                _ => query.push(idx),
            }
        }
    }

    let clean_a = map_a.apply(&latents);
    let clean_b = map_b.apply(&latents);
    let mut fused = Matrix::zeros(total, ca + cb);
    for i in 0..total {
        fused.row_mut(i)[..ca].copy_from_slice(clean_a.row(i));
        fused.row_mut(i)[ca..].copy_from_slice(clean_b.row(i));
    }
    let teacher = fused.matmul(&fusion)?;

    let mut noisy = |clean: &Matrix| {
        let mut m = clean.clone();
        m.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v += cfg.noise_sigma * rng.normal());
        m
    };
    let modality_a = noisy(&clean_a);
    let modality_b = noisy(&clean_b);

    Ok(SyntheticScene {
        latents,
        modality_a,
        modality_b,
        teacher,
        labels,
        train,
        database,
        query,
    })
}

/// One-hidden-layer perceptron `tanh(X W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Hidden activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    hidden: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentGrad {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub input: Matrix,
}

fn add_bias(m: &mut Matrix, bias: &[f64]) {
    for i in 0..m.rows() {
        m.row_mut(i).iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for row in m.iter_rows() {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out
}

impl StudentModel {
    /// Scaled-normal weights (`1/sqrt(fan_in)`), zero biases.
    pub fn init(rng: &mut RngStream, input_dim: usize, hidden: usize, output_dim: usize) -> Self {
        Self {
            w1: rng.normal_matrix(input_dim, hidden, 1.0 / (input_dim as f64).sqrt()),
            b1: vec![0.0; hidden],
            w2: rng.normal_matrix(hidden, output_dim, 1.0 / (hidden as f64).sqrt()),
            b2: vec![0.0; output_dim],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn num_params(&self) -> usize {
        self.w1.as_slice().len() + self.b1.len() + self.w2.as_slice().len() + self.b2.len()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        let mut hidden = x.matmul(&self.w1)?;
        add_bias(&mut hidden, &self.b1);
        hidden.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
        let mut out = hidden.matmul(&self.w2)?;
        add_bias(&mut out, &self.b2);
        Ok((out, ForwardCache { hidden }))
    }

    pub fn backward(&self, x: &Matrix, cache: &ForwardCache, grad_out: &Matrix) -> Result<StudentGrad> {
        let w2 = cache.hidden.transpose().matmul(grad_out)?;
        let b2 = column_sums(grad_out);
        let mut dz = grad_out.matmul(&self.w2.transpose())?;
        for (d, a) in dz.as_mut_slice().iter_mut().zip(cache.hidden.as_slice()) {
            *d *= 1.0 - a * a;
        }
        let w1 = x.transpose().matmul(&dz)?;
        let b1 = column_sums(&dz);
        let input = dz.matmul(&self.w1.transpose())?;
        Ok(StudentGrad { w1, b1, w2, b2, input })
    }

    pub fn step(&mut self, grad: &StudentGrad, lr: f64) {
        self.w1.axpy(-lr, &grad.w1);
        self.w2.axpy(-lr, &grad.w2);
        self.b1.iter_mut().zip(&grad.b1).for_each(|(p, g)| *p -= lr * g);
        self.b2.iter_mut().zip(&grad.b2).for_each(|(p, g)| *p -= lr * g);
    }

    /// Parameters flattened as `w1, b1, w2, b2`.
    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(self.w1.as_slice());
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(self.w2.as_slice());
        v.extend_from_slice(&self.b2);
        v
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let mut rest = params;
        for dst in [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
        ] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
    }
}

impl StudentGrad {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend_from_slice(self.w1.as_slice());
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(self.w2.as_slice());
        v.extend_from_slice(&self.b2);
        v
    }
}

/// Fully-connected layer `X A + bias` aligning descriptor widths.
#[derive(Debug, Clone, PartialEq)]
pub struct Adaptor {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptorGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub input: Matrix,
}

impl Adaptor {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::DimensionMismatch {
                expected: weight.cols(),
                actual: bias.len(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn init(rng: &mut RngStream, input_dim: usize, output_dim: usize) -> Self {
        Self {
            weight: rng.normal_matrix(input_dim, output_dim, 1.0 / (input_dim as f64).sqrt()),
            bias: vec![0.0; output_dim],
        }
    }

    pub fn backward(&self, x: &Matrix, grad_out: &Matrix) -> Result<AdaptorGrad> {
        Ok(AdaptorGrad {
            weight: x.transpose().matmul(grad_out)?,
            bias: column_sums(grad_out),
            input: grad_out.matmul(&self.weight.transpose())?,
        })
    }

    pub fn step(&mut self, grad: &AdaptorGrad, lr: f64) {
        self.weight.axpy(-lr, &grad.weight);
        self.bias.iter_mut().zip(&grad.bias).for_each(|(p, g)| *p -= lr * g);
    }
}

pub fn apply_adaptor(a: &Adaptor, x: &Matrix) -> Result<Matrix> {
    let mut out = x.matmul(&a.weight)?;
    add_bias(&mut out, &a.bias);
    Ok(out)
}

/// Where the width-aligning adaptor sits when student and teacher widths
/// differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptorPlacement {
    /// Maps teacher descriptors to the student width. Fitted once on the
    /// teacher's own triplet loss, then frozen.
    Teacher,
    /// Maps student outputs to the teacher width for the distillation terms
    /// only; trained jointly with the student.
    Student,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub distill: DistillConfig,
    pub triplet: TripletConfig,
    pub hidden: usize,
    /// Student output width; `None` means the teacher width.
    pub student_dim: Option<usize>,
    pub adaptor: Option<AdaptorPlacement>,
    pub adaptor_prefit_epochs: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub k_max: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            distill: DistillConfig::default(),
            triplet: TripletConfig::default(),
            hidden: 32,
            student_dim: None,
            adaptor: None,
            adaptor_prefit_epochs: 100,
            epochs: 60,
            learning_rate: 0.04,
            seeds: vec![1, 2, 3, 4, 5],
            variants: Variant::ALL.to_vec(),
            k_max: DEFAULT_K_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task_loss: f64,
    pub kd_s: f64,
    pub kd_c: f64,
    /// Objective actually optimized by the run's variant.
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub variant: Variant,
    pub seed: u64,
    /// Entry `e` is measured before the `e`-th update; the last entry is
    /// measured after training.
    pub epochs: Vec<EpochRecord>,
    pub recall: RecallReport,
    pub final_params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantSummary {
    pub variant: Variant,
    pub mean_ar1: f64,
    pub std_ar1: f64,
    pub mean_ar1pct: f64,
    pub std_ar1pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub runs: Vec<RunRecord>,
    /// Retrieval quality of the teacher descriptors themselves.
    pub teacher_recall: RecallReport,
    /// Retrieval quality of the raw modality-A descriptors.
    pub input_recall: RecallReport,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ExperimentReport {
    /// Mean and population standard deviation of final recalls over seeds,
    /// one entry per variant in first-seen order.
    pub fn summary(&self) -> Vec<VariantSummary> {
        let mut order: Vec<Variant> = Vec::new();
        for r in &self.runs {
            if !order.contains(&r.variant) {
                order.push(r.variant);
            }
        }
        order
            .into_iter()
            .map(|variant| {
                let runs: Vec<&RunRecord> = self.runs.iter().filter(|r| r.variant == variant).collect();
                let ar1: Vec<f64> = runs.iter().map(|r| r.recall.ar_at_1).collect();
                let ar1pct: Vec<f64> = runs.iter().map(|r| r.recall.ar_at_1pct).collect();
                let (mean_ar1, std_ar1) = mean_std(&ar1);
                let (mean_ar1pct, std_ar1pct) = mean_std(&ar1pct);
                VariantSummary {
                    variant,
                    mean_ar1,
                    std_ar1,
                    mean_ar1pct,
                    std_ar1pct,
                }
            })
            .collect()
    }
}

/// Inputs shared by every run of one experiment.
struct Prepared {
    train_x: Matrix,
    train_labels: Vec<usize>,
    /// Teacher descriptors at the width used by the distillation terms.
    teacher_kd: Matrix,
    db_x: Matrix,
    query_x: Matrix,
    truth: GroundTruth,
    student_dim: usize,
    teacher_dim: usize,
}

fn fit_teacher_adaptor(
    teacher: &Matrix,
    labels: &[usize],
    out_dim: usize,
    cfg: &ExperimentConfig,
) -> Result<Adaptor> {
    let mut rng = seeded_rng(cfg.scene.seed ^ 0xADA9_70C0_FFEE_D00D);
    let mut adaptor = Adaptor::init(&mut rng, teacher.cols(), out_dim);
    for epoch in 0..cfg.adaptor_prefit_epochs {
        let out = apply_adaptor(&adaptor, teacher)?;
        let loss = triplet_loss(&out, labels, &cfg.triplet)?;
        if !loss.value.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: loss.value,
            });
        }
        let g = adaptor.backward(teacher, &loss.grad)?;
        adaptor.step(&g, cfg.learning_rate);
    }
    Ok(adaptor)
}

fn prepare(scene: &SyntheticScene, cfg: &ExperimentConfig) -> Result<Prepared> {
    let teacher_dim = cfg.scene.teacher_dim;
    let student_dim = cfg.student_dim.unwrap_or(teacher_dim);
    let train_labels = scene.train_labels();
    let teacher_train = scene.teacher.select_rows(&scene.train);
    let teacher_kd = if student_dim == teacher_dim {
        teacher_train
    } else {
        match cfg.adaptor {
            None => {
                return Err(Error::InvalidConfig(format!(
                    "student width {student_dim} differs from teacher width {teacher_dim}; an adaptor is required"
                )))
            }
            Some(AdaptorPlacement::Student) => teacher_train,
            Some(AdaptorPlacement::Teacher) => {
                let a = fit_teacher_adaptor(&teacher_train, &train_labels, student_dim, cfg)?;
                apply_adaptor(&a, &teacher_train)?
            }
        }
    };
    Ok(Prepared {
        train_x: scene.modality_a.select_rows(&scene.train),
        train_labels,
        teacher_kd,
        db_x: scene.modality_a.select_rows(&scene.database),
        query_x: scene.modality_a.select_rows(&scene.query),
        truth: scene.ground_truth(),
        student_dim,
        teacher_dim,
    })
}

fn run_single(p: &Prepared, cfg: &ExperimentConfig, variant: Variant, seed: u64) -> Result<RunRecord> {
    let mut rng = seeded_rng(seed);
    let mut model = StudentModel::init(&mut rng, p.train_x.cols(), cfg.hidden, p.student_dim);
    let mut student_adaptor = (p.student_dim != p.teacher_dim
        && cfg.adaptor == Some(AdaptorPlacement::Student))
    .then(|| Adaptor::init(&mut rng, p.student_dim, p.teacher_dim));

    let mut epochs = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let (out, cache) = model.forward(&p.train_x)?;
        let kd_in = match &student_adaptor {
            Some(a) => apply_adaptor(a, &out)?,
            None => out.clone(),
        };
        let task = triplet_loss(&out, &p.train_labels, &cfg.triplet)?;
        let kd_s = kd_s_loss(&p.teacher_kd, &kd_in, &cfg.distill)?;
        let kd_c = kd_c_loss(&p.teacher_kd, &kd_in, &cfg.distill)?;

        // Distillation gradients live at the adaptor output; the task
        // gradient lives at the student output.
        let zero_task = LossValue {
            value: 0.0,
            grad: Matrix::zeros(kd_in.rows(), kd_in.cols()),
        };
        let kd = combine_objective(&zero_task, Some(&kd_s), Some(&kd_c), &cfg.distill, variant);
        let total = task.value + kd.value;
        epochs.push(EpochRecord {
            epoch,
            task_loss: task.value,
            kd_s: kd_s.value,
            kd_c: kd_c.value,
            total,
        });
        if !total.is_finite() {
            return Err(Error::Diverged { epoch, loss: total });
        }
        if epoch == cfg.epochs {
            break;
        }

        let mut grad_out = task.grad;
        match &mut student_adaptor {
            Some(a) => {
                let ag = a.backward(&out, &kd.grad)?;
                grad_out.axpy(1.0, &ag.input);
                a.step(&ag, cfg.learning_rate);
            }
            None => grad_out.axpy(1.0, &kd.grad),
        }
        let g = model.backward(&p.train_x, &cache, &grad_out)?;
        model.step(&g, cfg.learning_rate);
    }

    let (db, _) = model.forward(&p.db_x)?;
    let (queries, _) = model.forward(&p.query_x)?;
    let recall = evaluate(&queries, &db, &p.truth, cfg.k_max)?;
    Ok(RunRecord {
        variant,
        seed,
        epochs,
        recall,
        final_params: model.params(),
    })
}

/// Trains one student per (seed, variant) and evaluates retrieval.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.distill.validate()?;
    if cfg.seeds.is_empty() || cfg.variants.is_empty() {
        return Err(Error::InvalidConfig("need at least one seed and one variant".into()));
    }
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "learning rate {} must be > 0",
            cfg.learning_rate
        )));
    }
    if cfg.hidden == 0 {
        return Err(Error::InvalidConfig("hidden width must be >= 1".into()));
    }
    let scene = gen_scene(&cfg.scene)?;
    run_experiment_on(&scene, cfg)
}

/// Same as [`run_experiment`] on an already generated scene.
pub fn run_experiment_on(scene: &SyntheticScene, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let p = prepare(scene, cfg)?;
    let teacher_recall = evaluate(
        &scene.teacher.select_rows(&scene.query),
        &scene.teacher.select_rows(&scene.database),
        &p.truth,
        cfg.k_max,
    )?;
    let input_recall = evaluate(&p.query_x, &p.db_x, &p.truth, cfg.k_max)?;

    let mut runs = Vec::with_capacity(cfg.seeds.len() * cfg.variants.len());
    for &variant in &cfg.variants {
        for &seed in &cfg.seeds {
            runs.push(run_single(&p, cfg, variant, seed)?);
        }
    }
    Ok(ExperimentReport {
        runs,
        teacher_recall,
        input_recall,
    })
}
