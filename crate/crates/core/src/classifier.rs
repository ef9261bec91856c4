//! One-vs-rest linear SVM and the ZSL / GZSL evaluation protocols.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    /// Weight of the mean hinge loss against `½‖w‖²`.
    pub c: f64,
    pub epochs: usize,
    /// Initial step size; decays as `η / (1 + η t)` with `t` counting updates.
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            c: 1.0,
            epochs: 100,
            learning_rate: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    /// Class label of each `(w, b)` row, ascending.
    pub classes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub config: SvmConfig,
}

/// `½‖w‖² + C · mean_i max(0, 1 − y_i (w·x_i + b))` with `y_i = ±1`.
pub fn hinge_objective(w: &[f64], b: f64, xs: &[Vec<f64>], ys: &[f64], c: f64) -> f64 {
    let reg = 0.5 * w.iter().map(|v| v * v).sum::<f64>();
    let hinge: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, &y)| (1.0 - y * (dot(w, x) + b)).max(0.0))
        .sum();
    reg + c * hinge / xs.len() as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stochastic subgradient descent on [`hinge_objective`] for one binary
/// problem. The bias is not regularized.
pub fn train_binary(xs: &[Vec<f64>], ys: &[f64], config: &SvmConfig, rng: &mut ChaCha8Rng) -> (Vec<f64>, f64) {
    let dim = xs.first().map_or(0, Vec::len);
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut t = 0u64;
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for &i in &order {
            let eta = config.learning_rate / (1.0 + config.learning_rate * t as f64);
            t += 1;
            let (x, y) = (&xs[i], ys[i]);
            let violated = y * (dot(&w, x) + b) < 1.0;
            for wj in w.iter_mut() {
                *wj *= 1.0 - eta;
            }
            if violated {
                for (wj, &xj) in w.iter_mut().zip(x) {
                    *wj += eta * config.c * y * xj;
                }
                b += eta * config.c * y;
            }
        }
    }
    (w, b)
}

/// One-vs-rest training over the distinct labels in `labels`.
pub fn train_svm(latents: &[Vec<f32>], labels: &[usize], config: &SvmConfig) -> Result<SvmModel> {
    if latents.len() != labels.len() {
        return Err(Error::Invalid("latents and labels differ in length".into()));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Invalid(format!(
            "svm needs at least two classes, got {}",
            classes.len()
        )));
    }
    if !(config.c > 0.0 && config.learning_rate > 0.0) {
        return Err(Error::Invalid("svm c and learning_rate must be positive".into()));
    }
    let xs: Vec<Vec<f64>> = latents
        .iter()
        .map(|l| l.iter().map(|&v| f64::from(v)).collect())
        .collect();
    let mut weights = Vec::with_capacity(classes.len());
    let mut biases = Vec::with_capacity(classes.len());
    for (k, &class) in classes.iter().enumerate() {
        let ys: Vec<f64> = labels.iter().map(|&y| if y == class { 1.0 } else { -1.0 }).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(k as u64 + 1);
        let (w, b) = train_binary(&xs, &ys, config, &mut rng);
        weights.push(w);
        biases.push(b);
    }
    Ok(SvmModel {
        classes,
        weights,
        biases,
        config: config.clone(),
    })
}

impl SvmModel {
    pub fn scores(&self, x: &[f32]) -> Vec<f64> {
        let x: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| dot(w, &x) + b)
            .collect()
    }

    /// Highest-scoring class label; ties go to the lowest class.
    pub fn predict_one(&self, x: &[f32]) -> usize {
        self.classes[crate::sane::argmax(&self.scores(x))]
    }

    pub fn predict(&self, latents: &[Vec<f32>]) -> Vec<usize> {
        latents.iter().map(|x| self.predict_one(x)).collect()
    }
}

// ---- evaluation ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Zsl,
    Gzsl,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Zsl => "zsl",
            Setting::Gzsl => "gzsl",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub count: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub setting: Setting,
    pub seed: u64,
    pub accuracy: f64,
    /// Label set, ascending; indexes the confusion matrix.
    pub classes: Vec<usize>,
    pub per_class: Vec<ClassAccuracy>,
    /// `confusion[true][predicted]` over `classes`.
    pub confusion: Vec<Vec<usize>>,
    pub seen_accuracy: Option<f64>,
    pub unseen_accuracy: Option<f64>,
}

impl EvalReport {
    /// Scores `predicted` against `truth`. Every true and predicted label
    /// must be in `classes`. `unseen` marks the unseen labels for the
    /// per-group accuracies (GZSL only).
    pub fn from_predictions(
        method: &str,
        setting: Setting,
        seed: u64,
        classes: &[usize],
        truth: &[usize],
        predicted: &[usize],
        unseen: &[usize],
    ) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Invalid("truth and predictions differ in length".into()));
        }
        if truth.is_empty() {
            return Err(Error::Invalid(format!("{method}: empty test set")));
        }
        let mut classes = classes.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let index: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let k = classes.len();
        let mut confusion = vec![vec![0usize; k]; k];
        for (&t, &p) in truth.iter().zip(predicted) {
            let ti = *index.get(&t).ok_or_else(|| {
                Error::Invalid(format!("{method}: test label {t} outside the label set {classes:?}"))
            })?;
            let pi = *index
                .get(&p)
                .ok_or_else(|| Error::Invalid(format!("{method}: prediction {p} outside the label set")))?;
            confusion[ti][pi] += 1;
        }
        let per_class: Vec<ClassAccuracy> = classes
            .iter()
            .enumerate()
            .map(|(i, &c)| ClassAccuracy {
                class: c,
                count: confusion[i].iter().sum(),
                correct: confusion[i][i],
            })
            .collect();
        let group = |want_unseen: bool| {
            let (n, ok) = per_class
                .iter()
                .filter(|pc| unseen.contains(&pc.class) == want_unseen)
                .fold((0, 0), |(n, ok), pc| (n + pc.count, ok + pc.correct));
            (n > 0).then(|| ok as f64 / n as f64)
        };
        let (seen_accuracy, unseen_accuracy) = match setting {
            Setting::Gzsl => (group(false), group(true)),
            Setting::Zsl => (None, None),
        };
        let correct: usize = per_class.iter().map(|pc| pc.correct).sum();
        Ok(EvalReport {
            method: method.to_string(),
            setting,
            seed,
            accuracy: correct as f64 / truth.len() as f64,
            classes,
            per_class,
            confusion,
            seen_accuracy,
            unseen_accuracy,
        })
    }
}

/// Classifies real test latents. In ZSL the model must have been trained on
/// exactly the unseen classes; in GZSL on all of them.
pub fn evaluate(
    setting: Setting,
    model: &SvmModel,
    latents: &[Vec<f32>],
    truth: &[usize],
    unseen: &[usize],
    seed: u64,
) -> Result<EvalReport> {
    if setting == Setting::Zsl {
        let mut u = unseen.to_vec();
        u.sort_unstable();
        if model.classes != u {
            return Err(Error::Invalid(format!(
                "zsl model classes {:?} differ from unseen classes {u:?}",
                model.classes
            )));
        }
    }
    let predicted = model.predict(latents);
    EvalReport::from_predictions("zest", setting, seed, &model.classes, truth, &predicted, unseen)
}

/// Mean and sample standard deviation of one method/setting over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub setting: Setting,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Groups reports by `(method, setting)` in first-appearance order.
pub fn summarize(reports: &[EvalReport]) -> Vec<Summary> {
    let mut keys: Vec<(String, Setting)> = Vec::new();
    for r in reports {
        let key = (r.method.clone(), r.setting);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(method, setting)| {
            let acc: Vec<f64> = reports
                .iter()
                .filter(|r| r.method == method && r.setting == setting)
                .map(|r| r.accuracy)
                .collect();
            let (mean, std) = mean_std(&acc);
            Summary {
                method,
                setting,
                runs: acc.len(),
                mean,
                std,
            }
        })
        .collect()
}

pub const REPORT_CSV_HEADER: &str = "method,setting,seed,accuracy,seen_accuracy,unseen_accuracy";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// One row per report.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = format!("{REPORT_CSV_HEADER}\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{:.6},{},{}\n",
            r.method,
            r.setting,
            r.seed,
            r.accuracy,
            opt(r.seen_accuracy),
            opt(r.unseen_accuracy)
        ));
    }
    out
}

/// Full reports, one JSON object per line.
pub fn reports_jsonl(reports: &[EvalReport]) -> String {
    reports
        .iter()
        .map(|r| serde_json::to_string(r).expect("report serializes") + "\n")
        .collect()
}

pub fn summary_csv(summaries: &[Summary]) -> String {
    let mut out = String::from("method,setting,runs,mean,std\n");
    for s in summaries {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            s.method, s.setting, s.runs, s.mean, s.std
        ));
    }
    out
}

/// Plain-text table of summaries.
pub fn summary_table(summaries: &[Summary]) -> String {
    let width = summaries.iter().map(|s| s.method.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<width$}  {:<7}  {:>4}  {:>17}\n", "method", "setting", "runs", "accuracy");
    for s in summaries {
        out.push_str(&format!(
            "{:<width$}  {:<7}  {:>4}  {:>7.4} ± {:<7.4}\n",
            s.method,
            s.setting.to_string(),
            s.runs,
            s.mean,
            s.std
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(n: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0f32, 0.3).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for i in 0..n {
            let c = i % 2;
            let center = if c == 0 { [-2.0, 1.0] } else { [2.0, -1.0] };
            x.push(vec![center[0] + noise.sample(&mut rng), center[1] + noise.sample(&mut rng)]);
            y.push(c * 3 + 1);
        }
        (x, y)
    }

    #[test]
    fn separable_blobs_are_fit_exactly() {
        let (x, y) = blobs(60, 1);
        let m = train_svm(&x, &y, &SvmConfig::default()).unwrap();
        assert_eq!(m.classes, vec![1, 4]);
        assert_eq!(m.predict(&x), y);
    }

    #[test]
    fn duplicated_data_gives_same_predictions() {
        let (x, y) = blobs(40, 2);
        let a = train_svm(&x, &y, &SvmConfig::default()).unwrap();
        let x2: Vec<Vec<f32>> = x.iter().chain(&x).cloned().collect();
        let y2: Vec<usize> = y.iter().chain(&y).copied().collect();
        let b = train_svm(&x2, &y2, &SvmConfig::default()).unwrap();
        for i in -10..=10 {
            for j in -10..=10 {
                let p = [i as f32 * 0.4, j as f32 * 0.4];
                assert_eq!(a.predict_one(&p), b.predict_one(&p), "{p:?}");
            }
        }
    }

    /// Coarse grid, then a finer grid around the best coarse point.
    fn grid_optimum(xs: &[Vec<f64>], ys: &[f64], c: f64) -> f64 {
        let search = |best: (f64, [f64; 3]), center: [f64; 3], half: f64, steps: i32| {
            let h = half / steps as f64;
            let mut local = best;
            for i in -steps..=steps {
                for j in -steps..=steps {
                    for k in -steps..=steps {
                        let w = [center[0] + i as f64 * h, center[1] + j as f64 * h];
                        let b = center[2] + k as f64 * h;
                        let f = hinge_objective(&w, b, xs, ys, c);
                        if f < local.0 {
                            local = (f, [w[0], w[1], b]);
                        }
                    }
                }
            }
            local
        };
        let coarse = search((f64::INFINITY, [0.0; 3]), [0.0; 3], 4.0, 80);
        search(coarse, coarse.1, 0.1, 50).0
    }

    #[test]
    fn tiny_objective_is_near_grid_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noise = Normal::new(0.0, 0.8).unwrap();
        let xs: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                vec![s + noise.sample(&mut rng), 0.5 * s + noise.sample(&mut rng)]
            })
            .collect();
        let ys: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let cfg = SvmConfig::default();
        let (w, b) = train_binary(&xs, &ys, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let ours = hinge_objective(&w, b, &xs, &ys, cfg.c);
        let opt = grid_optimum(&xs, &ys, cfg.c);
        assert!(ours <= opt * 1.02, "svm {ours} vs grid {opt}");
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(train_svm(&[vec![0.0], vec![1.0]], &[2, 2], &SvmConfig::default()).is_err());
    }

    #[test]
    fn ties_and_rescaling() {
        let m = SvmModel {
            classes: vec![0, 1, 2, 3],
            weights: vec![vec![0.0], vec![1.0], vec![0.5], vec![1.0]],
            biases: vec![0.0, 0.0, 0.0, 0.0],
            config: SvmConfig::default(),
        };
        assert_eq!(m.predict_one(&[1.0]), 1);
        let (x, y) = blobs(30, 3);
        let a = train_svm(&x, &y, &SvmConfig::default()).unwrap();
        let mut b = a.clone();
        b.weights.iter_mut().flatten().for_each(|w| *w *= 3.5);
        b.biases.iter_mut().for_each(|v| *v *= 3.5);
        assert_eq!(a.predict(&x), b.predict(&x));
    }

    #[test]
    fn report_invariants() {
        let truth = [0, 0, 1, 1, 2, 2, 2];
        let pred = [0, 1, 1, 1, 2, 0, 2];
        let r = EvalReport::from_predictions("m", Setting::Gzsl, 0, &[0, 1, 2], &truth, &pred, &[2]).unwrap();
        assert!((r.accuracy - 5.0 / 7.0).abs() < 1e-12);
        for (row, pc) in r.confusion.iter().zip(&r.per_class) {
            assert_eq!(row.iter().sum::<usize>(), pc.count);
        }
        let weighted: f64 = r.per_class.iter().map(|pc| pc.correct as f64).sum::<f64>() / 7.0;
        assert!((weighted - r.accuracy).abs() < 1e-12);
        assert_eq!(r.unseen_accuracy, Some(2.0 / 3.0));
        assert_eq!(r.seen_accuracy, Some(0.75));
        let perfect = EvalReport::from_predictions("m", Setting::Zsl, 0, &[0, 1, 2], &truth, &truth, &[]).unwrap();
        assert_eq!(perfect.accuracy, 1.0);
        assert!(EvalReport::from_predictions("m", Setting::Zsl, 0, &[0, 1], &truth, &pred, &[]).is_err());
    }

    #[test]
    fn zsl_requires_unseen_only_model() {
        let (x, y) = blobs(20, 4);
        let m = train_svm(&x, &y, &SvmConfig::default()).unwrap();
        assert!(evaluate(Setting::Zsl, &m, &x, &y, &[1, 4], 0).is_ok());
        assert!(evaluate(Setting::Zsl, &m, &x, &y, &[1], 0).is_err());
    }

    #[test]
    fn summaries_and_formats() {
        let mk = |acc: f64, seed| EvalReport {
            method: "zest".into(),
            setting: Setting::Zsl,
            seed,
            accuracy: acc,
            classes: vec![],
            per_class: vec![],
            confusion: vec![],
            seen_accuracy: None,
            unseen_accuracy: None,
        };
        let s = summarize(&[mk(0.5, 0), mk(0.7, 1)]);
        assert_eq!(s.len(), 1);
        assert!((s[0].mean - 0.6).abs() < 1e-12);
        assert!((s[0].std - 0.02f64.sqrt()).abs() < 1e-12);
        assert!(reports_csv(&[mk(0.5, 0)]).starts_with(REPORT_CSV_HEADER));
        assert_eq!(reports_jsonl(&[mk(0.5, 0), mk(0.7, 1)]).lines().count(), 2);
        assert!(summary_table(&s).contains("0.6000 ± 0.1414"));
    }
}
