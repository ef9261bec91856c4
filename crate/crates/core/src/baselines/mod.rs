//! Comparison pipelines built on the same SANE latents as ZEST.
//!
//! Every pipeline clusters the non-test latents of all devices into
//! `|Γ|` groups, maps clusters to devices with the optimal one-to-one
//! assignment on that pool, and then labels held-out test sequences:
//!
//! * `vae-k`: a small VAE compresses `l` to `N` dimensions, then k-means.
//! * `seqcr`: k-means on `λ` with random initial centers.
//! * `seqcs`: k-means on `λ` started from the device attribute vectors.
//! * `deft`: a random forest trained on `λ` and the `seqcs` cluster labels.
//!
//! The GZSL score covers all test sequences; the ZSL score covers the test
//! sequences of unseen devices.

mod forest;
mod hungarian;
mod kmeans;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use forest::{DecisionTree, ForestConfig, RandomForest};
pub use hungarian::{cluster_accuracy, cluster_mapping, contingency, hungarian};
pub use kmeans::{kmeans, nearest, sq_dist, ClusterResult, KMeansInit};

use crate::classifier::{EvalReport, Setting};
use crate::cvae::{train_cvae, Cvae, CvaeConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    VaeK,
    SeqCr,
    SeqCs,
    Deft,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [Baseline::VaeK, Baseline::SeqCr, Baseline::SeqCs, Baseline::Deft];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::VaeK => "vae-k",
            Baseline::SeqCr => "seqcr",
            Baseline::SeqCs => "seqcs",
            Baseline::Deft => "deft",
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown baseline {s:?} (vae-k, seqcr, seqcs, deft)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub kmeans_max_iter: usize,
    pub forest: ForestConfig,
    /// VAE for `vae-k`; `attr_dim` is forced to 0 and `z_dim` to `N`.
    pub vae: CvaeConfig,
    /// Skip VAE training and compress with the initial weights.
    pub vae_untrained: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            kmeans_max_iter: 100,
            forest: ForestConfig::default(),
            vae: CvaeConfig {
                epochs: 100,
                ..CvaeConfig::default()
            },
            vae_untrained: false,
        }
    }
}

/// Latents of one experiment split. Labels are global device indices
/// `0..attributes.len()`.
#[derive(Debug, Clone, Copy)]
pub struct BaselineInput<'a> {
    pub pool_l: &'a [Vec<f32>],
    pub pool_lambda: &'a [Vec<f32>],
    pub pool_labels: &'a [usize],
    pub test_l: &'a [Vec<f32>],
    pub test_lambda: &'a [Vec<f32>],
    pub test_labels: &'a [usize],
    /// One attribute vector per device, indexed by label.
    pub attributes: &'a [Vec<f32>],
    pub unseen: &'a [usize],
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineResult {
    pub zsl: EvalReport,
    pub gzsl: EvalReport,
    /// Accuracy of the clustering on the pool it was fitted to.
    pub pool_cluster_accuracy: f64,
}

fn widen(v: &[Vec<f32>]) -> Vec<Vec<f64>> {
    v.iter().map(|r| r.iter().map(|&x| f64::from(x)).collect()).collect()
}

/// Posterior means of a plain VAE fitted on `pool`, for `pool` and `test`.
fn vae_compress(
    pool: &[Vec<f32>],
    test: &[Vec<f32>],
    dim: usize,
    config: &BaselineConfig,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let input_dim = pool.first().map_or(0, Vec::len);
    let cfg = CvaeConfig {
        input_dim,
        attr_dim: 0,
        z_dim: dim,
        seed,
        ..config.vae.clone()
    };
    let model = if config.vae_untrained {
        Cvae::<f32>::new(cfg)?
    } else {
        train_cvae(pool, &vec![0; pool.len()], &[Vec::new()], cfg)?.model
    };
    let encode = |rows: &[Vec<f32>]| -> Result<Vec<Vec<f64>>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let l = Tensor::from_rows(rows)?;
        let a = Tensor::zeros(&[rows.len(), 0]);
        let (mu, _) = model.encode(&l, &a)?;
        Ok((0..mu.rows()).map(|i| mu.row(i).iter().map(|&v| f64::from(v)).collect()).collect())
    };
    Ok((encode(pool)?, encode(test)?))
}

pub fn run_baseline(which: Baseline, input: &BaselineInput<'_>, config: &BaselineConfig) -> Result<BaselineResult> {
    let k = input.attributes.len();
    if k < 2 {
        return Err(Error::Invalid("baselines need at least two devices".into()));
    }
    if let Some(&bad) = input.pool_labels.iter().chain(input.test_labels).find(|&&c| c >= k) {
        return Err(Error::Invalid(format!("no attribute vector for device {bad}")));
    }
    let attr_dim = input.attributes[0].len();
    let seeds = || -> Result<KMeansInit> {
        if input.attributes.iter().any(|a| a.len() != attr_dim || a.is_empty()) {
            return Err(Error::Invalid("missing attribute vector for seeding".into()));
        }
        Ok(KMeansInit::Seeded(widen(input.attributes)))
    };
    let (pool, test) = match which {
        Baseline::VaeK => vae_compress(input.pool_l, input.test_l, attr_dim, config, input.seed)?,
        _ => (widen(input.pool_lambda), widen(input.test_lambda)),
    };
    let init = match which {
        Baseline::VaeK | Baseline::SeqCr => KMeansInit::Random,
        Baseline::SeqCs | Baseline::Deft => seeds()?,
    };
    let clusters = kmeans(&pool, k, &init, config.kmeans_max_iter, input.seed)?;
    let mapping = cluster_mapping(&clusters.assignments, input.pool_labels, k, k);
    let pool_correct = clusters
        .assignments
        .iter()
        .zip(input.pool_labels)
        .filter(|(&a, &l)| mapping[a] == Some(l))
        .count();
    let test_clusters: Vec<usize> = match which {
        Baseline::Deft => {
            let forest = RandomForest::fit(
                &pool,
                &clusters.assignments,
                &ForestConfig {
                    seed: input.seed,
                    ..config.forest.clone()
                },
            )?;
            test.iter().map(|x| forest.predict(x)).collect()
        }
        _ => test.iter().map(|x| nearest(x, &clusters.centers).0).collect(),
    };
    // an unmatched cluster can only arise when k exceeds the label count
    let predicted: Vec<usize> = test_clusters.iter().map(|&c| mapping[c].unwrap_or(0)).collect();
    let classes: Vec<usize> = (0..k).collect();
    let gzsl = EvalReport::from_predictions(
        which.name(),
        Setting::Gzsl,
        input.seed,
        &classes,
        input.test_labels,
        &predicted,
        input.unseen,
    )?;
    let (truth_u, pred_u): (Vec<usize>, Vec<usize>) = input
        .test_labels
        .iter()
        .zip(&predicted)
        .filter(|(t, _)| input.unseen.contains(t))
        .map(|(&t, &p)| (t, p))
        .unzip();
    let zsl = EvalReport::from_predictions(which.name(), Setting::Zsl, input.seed, &classes, &truth_u, &pred_u, input.unseen)?;
    Ok(BaselineResult {
        zsl,
        gzsl,
        pool_cluster_accuracy: pool_correct as f64 / input.pool_labels.len() as f64,
    })
}
