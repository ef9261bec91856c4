//! The ZEST pipeline for one device partition, stage by stage.
//!
//! 1. split every device's sequences 60/20/20 and fit the normalizer on the
//!    seen devices' training split;
//! 2. train SANE on the seen devices;
//! 3. strip it and extract `(l, λ)` for every sequence;
//! 4. attributes: mean `λ` over the seen devices' training split and over
//!    the unseen devices' non-test sequences;
//! 5. train the CVAE on seen training latents and generate `k` pseudo
//!    latents per device;
//! 6. fit the ZSL (unseen only) and GZSL (all devices) SVMs on pseudo data
//!    and score them on real test latents;
//! 7. run the baselines on the same latents.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attributes::{compute_attributes, extract_latents, strip, AttributeVector, Extractors, LatentSet};
use crate::baselines::{run_baseline, Baseline, BaselineConfig, BaselineInput, BaselineResult};
use crate::classifier::{evaluate, train_svm, EvalReport, Setting, SvmConfig, SvmModel};
use crate::cvae::{generate_pseudo, train_cvae, CvaeConfig, Decoder, PseudoDataset, TrainedCvae};
use crate::error::{Error, Result};
use crate::ingest::{make_partition, train_val_test_split, DataPoint, Dataset, DevicePartition, Normalizer, Split, SplitRatios};
use crate::sane::{evaluate_supervised, train_sane, SaneConfig, TrainedSane};
use crate::synth::ProfileSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Synthetic preset name.
    pub preset: Option<String>,
    /// Synthetic profile file.
    pub profiles: Option<PathBuf>,
    /// Packet CSV trace.
    pub csv: Option<PathBuf>,
    /// Generator seed for synthetic sources.
    pub seed: u64,
    /// Overrides for synthetic sources.
    pub sessions: Option<usize>,
    pub packets_per_session: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            preset: Some("separable-12".into()),
            profiles: None,
            csv: None,
            seed: 0,
            sessions: None,
            packets_per_session: None,
        }
    }
}

impl DataConfig {
    /// Profiles of a synthetic source with overrides applied, or `None` for
    /// a CSV source.
    pub fn profiles(&self) -> Result<Option<ProfileSet>> {
        let set = match (&self.preset, &self.profiles, &self.csv) {
            (Some(p), None, None) => ProfileSet::preset(p)?,
            (None, Some(path), None) => ProfileSet::load(path)?,
            (None, None, Some(_)) => return Ok(None),
            _ => {
                return Err(Error::Invalid(
                    "data source: set exactly one of preset, profiles, csv".into(),
                ))
            }
        };
        let first = &set.devices[0];
        let sessions = self.sessions.unwrap_or(first.sessions);
        let packets = self.packets_per_session.unwrap_or(first.packets_per_session);
        if self.sessions.is_some() || self.packets_per_session.is_some() {
            return Ok(Some(set.with_sessions(sessions, packets)));
        }
        Ok(Some(set))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub sane: SaneConfig,
    pub cvae: CvaeConfig,
    /// Pseudo latents generated per device.
    pub pseudo_per_class: usize,
    pub svm: SvmConfig,
    pub baselines: BaselineConfig,
    pub num_unseen: usize,
    /// Partition seeds; each gives one run.
    pub seeds: Vec<u64>,
    pub split: SplitRatios,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            sane: SaneConfig::default(),
            cvae: CvaeConfig::default(),
            pseudo_per_class: 500,
            svm: SvmConfig::default(),
            baselines: BaselineConfig::default(),
            num_unseen: 2,
            seeds: vec![0, 1, 2, 3, 4],
            split: SplitRatios::default(),
            output: PathBuf::from("zest-out"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Invalid("seeds list must not be empty".into()));
        }
        if self.pseudo_per_class == 0 {
            return Err(Error::Invalid("pseudo_per_class must be at least 1".into()));
        }
        self.sane.validate()?;
        self.cvae.validate()
    }

    /// SANE settings for one partition: seen classes only, seed mixed with
    /// the partition seed.
    pub fn sane_for(&self, plan: &Plan) -> SaneConfig {
        SaneConfig {
            num_classes: plan.partition.seen.len(),
            seed: self.sane.seed.wrapping_add(plan.partition.seed),
            ..self.sane.clone()
        }
    }

    pub fn cvae_for(&self, plan: &Plan) -> CvaeConfig {
        CvaeConfig {
            input_dim: self.sane.latent_dim,
            attr_dim: self.sane.attr_dim,
            seed: self.cvae.seed.wrapping_add(plan.partition.seed),
            ..self.cvae.clone()
        }
    }

    pub fn svm_for(&self, plan: &Plan) -> SvmConfig {
        SvmConfig {
            seed: self.svm.seed.wrapping_add(plan.partition.seed),
            ..self.svm.clone()
        }
    }
}

/// Builds the raw dataset described by `data`.
pub fn load_dataset(data: &DataConfig, seq_len: usize) -> Result<Dataset> {
    match data.profiles()? {
        Some(profiles) => Dataset::from_records(&crate::synth::generate(&profiles, data.seed)?, seq_len),
        None => {
            let path = data.csv.as_ref().expect("csv source");
            let trace = crate::ingest::parse_packet_csv(path)?;
            trace.ensure_skip_rate(crate::ingest::MAX_SKIP_FRACTION)?;
            Dataset::from_records(&trace.records, seq_len)
        }
    }
}

/// Partition, split and normalizer of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub partition: DevicePartition,
    pub split: Split,
    pub normalizer: Normalizer,
}

pub fn plan(dataset: &Dataset, num_unseen: usize, seed: u64, ratios: SplitRatios) -> Result<Plan> {
    let partition = make_partition(dataset.num_devices(), num_unseen, seed)?;
    let labels: Vec<usize> = (0..dataset.points.len()).map(|i| dataset.label_of(i)).collect();
    let split = train_val_test_split(&labels, ratios, seed);
    let seen_train: Vec<DataPoint> = split
        .train
        .iter()
        .filter(|&&i| partition.is_seen(labels[i]))
        .map(|&i| dataset.points[i].clone())
        .collect();
    let normalizer = Normalizer::fit(&seen_train)?;
    Ok(Plan {
        partition,
        split,
        normalizer,
    })
}

/// Normalized seen-device points for SANE, labeled by seen index.
pub fn sane_sets(dataset: &Dataset, plan: &Plan) -> (Vec<DataPoint>, Vec<DataPoint>, Vec<DataPoint>) {
    let pick = |idx: &[usize]| -> Vec<DataPoint> {
        idx.iter()
            .filter_map(|&i| {
                let seen = plan.partition.seen_index(dataset.label_of(i))?;
                let mut p = plan.normalizer.apply_point(&dataset.points[i]);
                p.label = Some(seen);
                Some(p)
            })
            .collect()
    };
    (pick(&plan.split.train), pick(&plan.split.val), pick(&plan.split.test))
}

/// `(l, λ)` for every dataset point, by dataset index.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTable {
    pub l: Vec<Vec<f32>>,
    pub lambda: Vec<Vec<f32>>,
}

impl LatentTable {
    /// One row per dataset point: `l_0..l_{M-1},lambda_0..lambda_{N-1}`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let m = self.l.first().map_or(0, Vec::len);
        let n = self.lambda.first().map_or(0, Vec::len);
        let mut w = csv::Writer::from_writer(writer);
        let header: Vec<String> = (0..m)
            .map(|j| format!("l_{j}"))
            .chain((0..n).map(|j| format!("lambda_{j}")))
            .collect();
        w.write_record(&header)?;
        for (l, lam) in self.l.iter().zip(&self.lambda) {
            w.write_record(l.iter().chain(lam).map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io("latents.csv", e))?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let m = header.iter().filter(|h| h.starts_with("l_")).count();
        let mut table = LatentTable {
            l: Vec::new(),
            lambda: Vec::new(),
        };
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::Format("ragged latent row".into()));
            }
            let v = rec
                .iter()
                .map(|x| x.parse::<f32>().map_err(|e| Error::Format(format!("latent value {x:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            table.l.push(v[..m].to_vec());
            table.lambda.push(v[m..].to_vec());
        }
        Ok(table)
    }

    fn select(&self, idx: &[usize]) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
        (
            idx.iter().map(|&i| self.l[i].clone()).collect(),
            idx.iter().map(|&i| self.lambda[i].clone()).collect(),
        )
    }
}

pub fn extract_table(ex: &Extractors, dataset: &Dataset, plan: &Plan) -> Result<LatentTable> {
    let points = plan.normalizer.apply(&dataset.points);
    let set = extract_latents(ex, "all", &points)?;
    Ok(LatentTable {
        l: set.l,
        lambda: set.lambda,
    })
}

/// Dataset indices whose sequences may feed a device's attribute vector.
pub fn attribute_sources(dataset: &Dataset, plan: &Plan, class: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = plan.split.train.clone();
    if !plan.partition.is_seen(class) {
        idx.extend_from_slice(&plan.split.val);
    }
    idx.retain(|&i| dataset.label_of(i) == class);
    idx.sort_unstable();
    idx
}

/// One attribute vector per device, in class order.
pub fn device_attributes(dataset: &Dataset, plan: &Plan, table: &LatentTable) -> Result<Vec<AttributeVector>> {
    let sets = (0..dataset.num_devices())
        .map(|c| {
            let (l, lambda) = table.select(&attribute_sources(dataset, plan, c));
            LatentSet {
                device_id: dataset.devices[c].clone(),
                l,
                lambda,
            }
        })
        .collect::<Vec<_>>();
    compute_attributes(&sets)
}

/// Members of `idx` whose class satisfies `keep`.
pub fn indices(dataset: &Dataset, idx: &[usize], keep: impl Fn(usize) -> bool) -> Vec<usize> {
    idx.iter().copied().filter(|&i| keep(dataset.label_of(i))).collect()
}

/// Trains the generator on seen training latents only.
pub fn train_generator(
    dataset: &Dataset,
    plan: &Plan,
    table: &LatentTable,
    attrs: &[AttributeVector],
    config: CvaeConfig,
) -> Result<TrainedCvae> {
    let idx = indices(dataset, &plan.split.train, |c| plan.partition.is_seen(c));
    let (l, _) = table.select(&idx);
    let labels: Vec<usize> = idx
        .iter()
        .map(|&i| plan.partition.seen_index(dataset.label_of(i)).expect("seen"))
        .collect();
    let seen_attrs: Vec<Vec<f32>> = plan.partition.seen.iter().map(|&c| attrs[c].a.clone()).collect();
    train_cvae(&l, &labels, &seen_attrs, config)
}

pub fn pseudo_data(decoder: &Decoder, attrs: &[AttributeVector], k: usize, seed: u64) -> Result<PseudoDataset> {
    let classes: Vec<(usize, Vec<f32>)> = attrs.iter().map(|a| a.a.clone()).enumerate().collect();
    generate_pseudo(decoder, &classes, k, seed)
}

/// SVMs for both settings; the ZSL model is `None` with a single unseen
/// device, where every unseen test sequence trivially gets that label.
pub fn train_classifiers(pseudo: &PseudoDataset, plan: &Plan, config: &SvmConfig) -> Result<(Option<SvmModel>, SvmModel)> {
    let zsl = if plan.partition.unseen.len() >= 2 {
        let p = pseudo.restrict(&plan.partition.unseen);
        Some(train_svm(&p.latents, &p.labels, config)?)
    } else {
        None
    };
    let gzsl = train_svm(&pseudo.latents, &pseudo.labels, config)?;
    Ok((zsl, gzsl))
}

pub fn evaluate_zest(
    dataset: &Dataset,
    plan: &Plan,
    table: &LatentTable,
    zsl: Option<&SvmModel>,
    gzsl: &SvmModel,
) -> Result<(EvalReport, EvalReport)> {
    let seed = plan.partition.seed;
    let unseen = &plan.partition.unseen;
    let test_u = indices(dataset, &plan.split.test, |c| unseen.contains(&c));
    let truth_u: Vec<usize> = test_u.iter().map(|&i| dataset.label_of(i)).collect();
    let zsl_report = match zsl {
        Some(m) => evaluate(Setting::Zsl, m, &table.select(&test_u).0, &truth_u, unseen, seed)?,
        None => {
            let pred = vec![unseen[0]; truth_u.len()];
            EvalReport::from_predictions("zest", Setting::Zsl, seed, unseen, &truth_u, &pred, unseen)?
        }
    };
    let test = &plan.split.test;
    let truth: Vec<usize> = test.iter().map(|&i| dataset.label_of(i)).collect();
    let gzsl_report = evaluate(Setting::Gzsl, gzsl, &table.select(test).0, &truth, unseen, seed)?;
    Ok((zsl_report, gzsl_report))
}

pub fn run_baselines(
    dataset: &Dataset,
    plan: &Plan,
    table: &LatentTable,
    attrs: &[AttributeVector],
    which: &[Baseline],
    config: &BaselineConfig,
) -> Result<Vec<(Baseline, BaselineResult)>> {
    let mut pool_idx: Vec<usize> = plan.split.train.iter().chain(&plan.split.val).copied().collect();
    pool_idx.sort_unstable();
    let (pool_l, pool_lambda) = table.select(&pool_idx);
    let pool_labels: Vec<usize> = pool_idx.iter().map(|&i| dataset.label_of(i)).collect();
    let (test_l, test_lambda) = table.select(&plan.split.test);
    let test_labels: Vec<usize> = plan.split.test.iter().map(|&i| dataset.label_of(i)).collect();
    let attributes: Vec<Vec<f32>> = attrs.iter().map(|a| a.a.clone()).collect();
    let input = BaselineInput {
        pool_l: &pool_l,
        pool_lambda: &pool_lambda,
        pool_labels: &pool_labels,
        test_l: &test_l,
        test_lambda: &test_lambda,
        test_labels: &test_labels,
        attributes: &attributes,
        unseen: &plan.partition.unseen,
        seed: plan.partition.seed,
    };
    which.iter().map(|&b| Ok((b, run_baseline(b, &input, config)?))).collect()
}

/// Everything one partition run produces.
#[derive(Debug, Clone)]
pub struct PartitionOutcome {
    pub plan: Plan,
    pub sane: TrainedSane,
    /// Supervised accuracy of SANE on the seen devices' test split.
    pub seen_test_accuracy: f64,
    pub table: LatentTable,
    pub attributes: Vec<AttributeVector>,
    pub cvae: TrainedCvae,
    pub pseudo: PseudoDataset,
    pub zsl: EvalReport,
    pub gzsl: EvalReport,
    pub baselines: Vec<(Baseline, BaselineResult)>,
}

impl PartitionOutcome {
    /// ZEST and baseline reports for both settings.
    pub fn reports(&self) -> Vec<EvalReport> {
        let mut out = vec![self.zsl.clone(), self.gzsl.clone()];
        for (_, r) in &self.baselines {
            out.push(r.zsl.clone());
            out.push(r.gzsl.clone());
        }
        out
    }
}

/// Settings varied by the `sweep` command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SweepParam {
    AttrDim,
    Unseen,
    Encoders,
    Heads,
}

impl SweepParam {
    pub const ALL: [SweepParam; 4] = [SweepParam::AttrDim, SweepParam::Unseen, SweepParam::Encoders, SweepParam::Heads];

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::AttrDim => "attr-dim",
            SweepParam::Unseen => "unseen",
            SweepParam::Encoders => "encoders",
            SweepParam::Heads => "heads",
        }
    }

    /// Sets the parameter and revalidates the whole config.
    pub fn apply(self, config: &mut ExperimentConfig, value: usize) -> Result<()> {
        match self {
            SweepParam::AttrDim => config.sane.attr_dim = value,
            SweepParam::Unseen => config.num_unseen = value,
            SweepParam::Encoders => config.sane.encoders = value,
            SweepParam::Heads => config.sane.heads = value,
        }
        config.validate()
    }
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepParam::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown sweep parameter {s:?} (expected attr-dim, unseen, encoders or heads)")))
    }
}

/// Runs SANE once for a partition and reuses it for every downstream stage.
pub fn run_sane_stage(dataset: &Dataset, config: &ExperimentConfig, seed: u64) -> Result<(Plan, TrainedSane, f64)> {
    let plan = plan(dataset, config.num_unseen, seed, config.split)?;
    let (train, val, test) = sane_sets(dataset, &plan);
    let sane = train_sane(&train, &val, config.sane_for(&plan))?;
    let seen_acc = evaluate_supervised(&sane.model, &test)?.accuracy;
    Ok((plan, sane, seen_acc))
}

/// Downstream stages for a trained SANE model.
pub fn run_downstream(
    dataset: &Dataset,
    config: &ExperimentConfig,
    plan: Plan,
    sane: TrainedSane,
    seen_test_accuracy: f64,
    which: &[Baseline],
) -> Result<PartitionOutcome> {
    let ex = strip(&sane.model);
    let table = extract_table(&ex, dataset, &plan)?;
    let attributes = device_attributes(dataset, &plan, &table)?;
    let cvae = train_generator(dataset, &plan, &table, &attributes, config.cvae_for(&plan))?;
    let pseudo = pseudo_data(&cvae.decoder(), &attributes, config.pseudo_per_class, plan.partition.seed)?;
    let (zsl_model, gzsl_model) = train_classifiers(&pseudo, &plan, &config.svm_for(&plan))?;
    let (zsl, gzsl) = evaluate_zest(dataset, &plan, &table, zsl_model.as_ref(), &gzsl_model)?;
    let baselines = run_baselines(dataset, &plan, &table, &attributes, which, &config.baselines)?;
    Ok(PartitionOutcome {
        plan,
        sane,
        seen_test_accuracy,
        table,
        attributes,
        cvae,
        pseudo,
        zsl,
        gzsl,
        baselines,
    })
}

pub fn run_partition(dataset: &Dataset, config: &ExperimentConfig, seed: u64, which: &[Baseline]) -> Result<PartitionOutcome> {
    let (plan, sane, acc) = run_sane_stage(dataset, config, seed)?;
    run_downstream(dataset, config, plan, sane, acc, which)
}
