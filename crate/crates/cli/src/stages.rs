//! Pipeline stages over a run directory.
//!
//! Layout under the output directory:
//!
//! ```text
//! dataset/                     ingest
//! seed-<s>/sane/               train-sane (plan, checkpoint, logs)
//! seed-<s>/attrs/              extract-attrs (latents, attributes)
//! seed-<s>/cvae/               train-cvae (decoder)
//! seed-<s>/pseudo/             gen-pseudo
//! seed-<s>/clf/                train-clf (ZSL and GZSL SVMs)
//! seed-<s>/eval/               eval
//! seed-<s>/baseline-<name>/    baseline <name>
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use zest::attributes::{read_attributes_csv, strip, write_attributes_csv, AttributeVector};
use zest::baselines::Baseline;
use zest::classifier::{reports_csv, reports_jsonl, EvalReport, SvmModel};
use zest::cvae::{Decoder, PseudoDataset};
use zest::digest::file_sha256;
use zest::experiment::{self as exp, ExperimentConfig, LatentTable, Plan};
use zest::ingest::Dataset;
use zest::sane::{evaluate_supervised, train_sane, write_log_csv, SaneModel, SupervisedEval};

use crate::store::{self, StageManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    TrainSane,
    ExtractAttrs,
    TrainCvae,
    GenPseudo,
    TrainClf,
    Eval,
    Baseline(Baseline),
}

impl Stage {
    /// The command that (re)builds this stage.
    pub fn command(self) -> String {
        match self {
            Stage::Ingest => "ingest".into(),
            Stage::TrainSane => "train-sane".into(),
            Stage::ExtractAttrs => "extract-attrs".into(),
            Stage::TrainCvae => "train-cvae".into(),
            Stage::GenPseudo => "gen-pseudo".into(),
            Stage::TrainClf => "train-clf".into(),
            Stage::Eval => "eval".into(),
            Stage::Baseline(b) => format!("baseline {b}"),
        }
    }

    fn dir_name(self) -> String {
        match self {
            Stage::Ingest => "dataset".into(),
            Stage::TrainSane => "sane".into(),
            Stage::ExtractAttrs => "attrs".into(),
            Stage::TrainCvae => "cvae".into(),
            Stage::GenPseudo => "pseudo".into(),
            Stage::TrainClf => "clf".into(),
            Stage::Eval => "eval".into(),
            Stage::Baseline(b) => format!("baseline-{b}"),
        }
    }

    fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::TrainSane => &[Stage::Ingest],
            Stage::ExtractAttrs => &[Stage::Ingest, Stage::TrainSane],
            Stage::TrainCvae => &[Stage::TrainSane, Stage::ExtractAttrs],
            Stage::GenPseudo => &[Stage::ExtractAttrs, Stage::TrainCvae],
            Stage::TrainClf => &[Stage::TrainSane, Stage::GenPseudo],
            Stage::Eval => &[Stage::Ingest, Stage::TrainSane, Stage::ExtractAttrs, Stage::TrainClf],
            Stage::Baseline(_) => &[Stage::Ingest, Stage::TrainSane, Stage::ExtractAttrs],
        }
    }
}

/// A run directory bound to one configuration.
pub struct Run {
    pub root: PathBuf,
    pub config: ExperimentConfig,
}

#[derive(Serialize)]
struct Keyed<'a, T: Serialize> {
    stage: &'a str,
    seed: Option<u64>,
    settings: T,
}

impl Run {
    pub fn new(root: impl Into<PathBuf>, config: ExperimentConfig) -> Run {
        Run {
            root: root.into(),
            config,
        }
    }

    pub fn dir(&self, stage: Stage, seed: u64) -> PathBuf {
        match stage {
            Stage::Ingest => self.root.join(stage.dir_name()),
            _ => self.root.join(format!("seed-{seed}")).join(stage.dir_name()),
        }
    }

    /// Hash of exactly the settings that shape `stage`.
    fn settings_hash(&self, stage: Stage, seed: u64) -> Result<String> {
        let c = &self.config;
        let name = stage.command();
        let key = |settings: serde_json::Value, seed: Option<u64>| {
            store::config_hash(&Keyed {
                stage: &name,
                seed,
                settings,
            })
        };
        Ok(match stage {
            Stage::Ingest => {
                let csv_sum = match &c.data.csv {
                    Some(p) => Some(file_sha256(p).with_context(|| format!("reading {}", p.display()))?),
                    None => None,
                };
                key(serde_json::json!([v(&c.data), c.sane.seq_len, csv_sum]), None)
            }
            Stage::TrainSane => key(serde_json::json!([v(&c.sane), c.num_unseen, v(&c.split)]), Some(seed)),
            Stage::ExtractAttrs => key(serde_json::Value::Null, Some(seed)),
            Stage::TrainCvae => key(v(&c.cvae), Some(seed)),
            Stage::GenPseudo => key(serde_json::json!(c.pseudo_per_class), Some(seed)),
            Stage::TrainClf => key(v(&c.svm), Some(seed)),
            Stage::Eval => key(serde_json::Value::Null, Some(seed)),
            Stage::Baseline(_) => key(v(&c.baselines), Some(seed)),
        })
    }

    /// Validates `stage` against the current settings and its upstreams,
    /// recursively, and returns its fingerprint.
    fn verified(&self, stage: Stage, seed: u64) -> Result<String> {
        let dir = self.dir(stage, seed);
        let cmd = stage.command();
        let Some(m) = store::read_manifest(&dir)? else {
            bail!("stage `{cmd}` has no artifacts in {}; run `zest {cmd}` first", dir.display());
        };
        if !store::outputs_intact(&dir, &m)? {
            bail!("artifacts of stage `{cmd}` in {} are missing or modified; re-run `zest {cmd}`", dir.display());
        }
        if m.config_hash != self.settings_hash(stage, seed)? || m.inputs != self.inputs(stage, seed)? {
            bail!("stage `{cmd}` is stale (settings or upstream artifacts changed); re-run `zest {cmd}`");
        }
        Ok(m.fingerprint())
    }

    fn inputs(&self, stage: Stage, seed: u64) -> Result<BTreeMap<String, String>> {
        stage
            .upstream()
            .iter()
            .map(|&u| Ok((u.command(), self.verified(u, seed)?)))
            .collect()
    }

    /// `Ok(None)` on a cache hit; otherwise clears the stage and returns the
    /// settings hash and upstream fingerprints to record once it is rebuilt.
    fn begin(&self, stage: Stage, seed: u64) -> Result<Option<(String, BTreeMap<String, String>)>> {
        let inputs = self.inputs(stage, seed)?;
        let hash = self.settings_hash(stage, seed)?;
        let dir = self.dir(stage, seed);
        if let Some(m) = store::read_manifest(&dir)? {
            if m.config_hash == hash && m.inputs == inputs && store::outputs_intact(&dir, &m)? {
                log::info!("{}: cache hit ({})", stage.command(), dir.display());
                return Ok(None);
            }
        }
        store::invalidate(&dir)?;
        log::info!("{}: running ({})", stage.command(), dir.display());
        Ok(Some((hash, inputs)))
    }

    fn finish(
        &self,
        stage: Stage,
        seed: u64,
        (hash, inputs): (String, BTreeMap<String, String>),
        files: &[&str],
    ) -> Result<StageManifest> {
        store::write_manifest(&self.dir(stage, seed), &stage.command(), hash, inputs, files)
    }

    // ---- ingest ----

    pub fn ingest(&self) -> Result<Dataset> {
        if let Some(token) = self.begin(Stage::Ingest, 0)? {
            let ds = exp::load_dataset(&self.config.data, self.config.sane.seq_len)?;
            if ds.num_devices() < 2 {
                bail!("ingest: the trace holds {} device(s); at least 2 are needed", ds.num_devices());
            }
            ds.save(&self.dir(Stage::Ingest, 0), None)?;
            self.finish(Stage::Ingest, 0, token, &["dataset.toml", "dataset.bin"])?;
        }
        self.load_dataset()
    }

    fn load_dataset(&self) -> Result<Dataset> {
        Ok(Dataset::load(&self.dir(Stage::Ingest, 0))?.0)
    }

    // ---- train-sane ----

    pub fn train_sane(&self, seed: u64) -> Result<(Plan, SaneModel<f32>, SupervisedEval)> {
        let dir = self.dir(Stage::TrainSane, seed);
        if let Some(token) = self.begin(Stage::TrainSane, seed)? {
            let ds = self.load_dataset()?;
            let plan = exp::plan(&ds, self.config.num_unseen, seed, self.config.split)?;
            let (train, val, test) = exp::sane_sets(&ds, &plan);
            let trained = train_sane(&train, &val, self.config.sane_for(&plan))?;
            let eval = evaluate_supervised(&trained.model, &test)?;
            log::info!(
                "train-sane seed {seed}: best epoch {}, seen test accuracy {:.4}",
                trained.best_epoch,
                eval.accuracy
            );
            write_json(&dir.join("plan.json"), &plan)?;
            trained.model.save(&dir.join("model.ckpt.json"))?;
            write_text(&dir.join("train_log.csv"), &write_log_csv(&trained.log))?;
            write_json(&dir.join("supervised.json"), &eval)?;
            self.finish(
                Stage::TrainSane,
                seed,
                token,
                &["plan.json", "model.ckpt.json", "model.ckpt.bin", "train_log.csv", "supervised.json"],
            )?;
        }
        self.load_sane(seed)
    }

    fn load_plan(&self, seed: u64) -> Result<Plan> {
        read_json(&self.dir(Stage::TrainSane, seed).join("plan.json"))
    }

    fn load_sane(&self, seed: u64) -> Result<(Plan, SaneModel<f32>, SupervisedEval)> {
        let dir = self.dir(Stage::TrainSane, seed);
        Ok((
            self.load_plan(seed)?,
            SaneModel::load(&dir.join("model.ckpt.json"))?,
            read_json(&dir.join("supervised.json"))?,
        ))
    }

    // ---- extract-attrs ----

    pub fn extract_attrs(&self, seed: u64) -> Result<(LatentTable, Vec<AttributeVector>)> {
        let dir = self.dir(Stage::ExtractAttrs, seed);
        if let Some(token) = self.begin(Stage::ExtractAttrs, seed)? {
            let ds = self.load_dataset()?;
            let (plan, model, _) = self.load_sane(seed)?;
            let table = exp::extract_table(&strip(&model), &ds, &plan)?;
            let attrs = exp::device_attributes(&ds, &plan, &table)?;
            table.write_csv(store::create(&dir.join("latents.csv"))?)?;
            write_attributes_csv(store::create(&dir.join("attributes.csv"))?, &attrs)?;
            self.finish(Stage::ExtractAttrs, seed, token, &["latents.csv", "attributes.csv"])?;
        }
        self.load_attrs(seed)
    }

    fn load_attrs(&self, seed: u64) -> Result<(LatentTable, Vec<AttributeVector>)> {
        let dir = self.dir(Stage::ExtractAttrs, seed);
        Ok((
            LatentTable::read_csv(store::open(&dir.join("latents.csv"))?)?,
            read_attributes_csv(store::open(&dir.join("attributes.csv"))?)?,
        ))
    }

    // ---- train-cvae ----

    pub fn train_cvae(&self, seed: u64) -> Result<Decoder> {
        let dir = self.dir(Stage::TrainCvae, seed);
        if let Some(token) = self.begin(Stage::TrainCvae, seed)? {
            let ds = self.load_dataset()?;
            let plan = self.load_plan(seed)?;
            let (table, attrs) = self.load_attrs(seed)?;
            let trained = exp::train_generator(&ds, &plan, &table, &attrs, self.config.cvae_for(&plan))?;
            trained.decoder().save(&dir.join("decoder.ckpt.json"))?;
            let mut log = String::from("epoch,recon,kl\n");
            for e in &trained.log {
                log.push_str(&format!("{},{:.6},{:.6}\n", e.epoch, e.recon, e.kl));
            }
            write_text(&dir.join("train_log.csv"), &log)?;
            self.finish(
                Stage::TrainCvae,
                seed,
                token,
                &["decoder.ckpt.json", "decoder.ckpt.bin", "train_log.csv"],
            )?;
        }
        Ok(Decoder::load(&dir.join("decoder.ckpt.json"))?)
    }

    // ---- gen-pseudo ----

    pub fn gen_pseudo(&self, seed: u64) -> Result<PseudoDataset> {
        let dir = self.dir(Stage::GenPseudo, seed);
        let k = self.config.pseudo_per_class;
        if let Some(token) = self.begin(Stage::GenPseudo, seed)? {
            let decoder = Decoder::load(&self.dir(Stage::TrainCvae, seed).join("decoder.ckpt.json"))?;
            let (_, attrs) = self.load_attrs(seed)?;
            let pseudo = exp::pseudo_data(&decoder, &attrs, k, seed)?;
            pseudo.write_csv(store::create(&dir.join("pseudo.csv"))?)?;
            let meta = PseudoMeta {
                k,
                seed,
                decoder_sha256: decoder.checksum(),
            };
            write_text(&dir.join("pseudo.toml"), &toml::to_string(&meta)?)?;
            self.finish(Stage::GenPseudo, seed, token, &["pseudo.csv", "pseudo.toml"])?;
        }
        Ok(PseudoDataset::read_csv(store::open(&dir.join("pseudo.csv"))?, k, seed)?)
    }

    // ---- train-clf ----

    pub fn train_clf(&self, seed: u64) -> Result<(Option<SvmModel>, SvmModel)> {
        let dir = self.dir(Stage::TrainClf, seed);
        if let Some(token) = self.begin(Stage::TrainClf, seed)? {
            let plan = self.load_plan(seed)?;
            let pseudo = PseudoDataset::read_csv(
                store::open(&self.dir(Stage::GenPseudo, seed).join("pseudo.csv"))?,
                self.config.pseudo_per_class,
                seed,
            )?;
            let (zsl, gzsl) = exp::train_classifiers(&pseudo, &plan, &self.config.svm_for(&plan))?;
            write_json(&dir.join("zsl.json"), &zsl)?;
            write_json(&dir.join("gzsl.json"), &gzsl)?;
            self.finish(Stage::TrainClf, seed, token, &["zsl.json", "gzsl.json"])?;
        }
        Ok((read_json(&dir.join("zsl.json"))?, read_json(&dir.join("gzsl.json"))?))
    }

    // ---- eval / baselines ----

    pub fn eval(&self, seed: u64) -> Result<Vec<EvalReport>> {
        let dir = self.dir(Stage::Eval, seed);
        if let Some(token) = self.begin(Stage::Eval, seed)? {
            let ds = self.load_dataset()?;
            let plan = self.load_plan(seed)?;
            let (table, _) = self.load_attrs(seed)?;
            let clf = self.dir(Stage::TrainClf, seed);
            let zsl: Option<SvmModel> = read_json(&clf.join("zsl.json"))?;
            let gzsl: SvmModel = read_json(&clf.join("gzsl.json"))?;
            let (z, g) = exp::evaluate_zest(&ds, &plan, &table, zsl.as_ref(), &gzsl)?;
            write_reports(&dir, &[z, g])?;
            self.finish(Stage::Eval, seed, token, &["reports.csv", "reports.jsonl"])?;
        }
        read_reports(&dir)
    }

    pub fn baseline(&self, which: Baseline, seed: u64) -> Result<Vec<EvalReport>> {
        let stage = Stage::Baseline(which);
        let dir = self.dir(stage, seed);
        if let Some(token) = self.begin(stage, seed)? {
            let ds = self.load_dataset()?;
            let plan = self.load_plan(seed)?;
            let (table, attrs) = self.load_attrs(seed)?;
            let (_, r) = exp::run_baselines(&ds, &plan, &table, &attrs, &[which], &self.config.baselines)?
                .pop()
                .expect("one baseline");
            log::info!("baseline {which} seed {seed}: pool cluster accuracy {:.4}", r.pool_cluster_accuracy);
            write_reports(&dir, &[r.zsl, r.gzsl])?;
            self.finish(stage, seed, token, &["reports.csv", "reports.jsonl"])?;
        }
        read_reports(&dir)
    }

    /// Every stage for one partition seed; returns ZEST and baseline reports.
    pub fn partition(&self, seed: u64, baselines: &[Baseline]) -> Result<Vec<EvalReport>> {
        self.ingest()?;
        self.train_sane(seed)?;
        self.extract_attrs(seed)?;
        self.train_cvae(seed)?;
        self.gen_pseudo(seed)?;
        self.train_clf(seed)?;
        let mut reports = self.eval(seed)?;
        for &b in baselines {
            reports.extend(self.baseline(b, seed)?);
        }
        Ok(reports)
    }
}

#[derive(Serialize)]
struct PseudoMeta {
    k: usize,
    seed: u64,
    decoder_sha256: String,
}

fn v<T: Serialize>(x: &T) -> serde_json::Value {
    serde_json::to_value(x).expect("settings serialize")
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_reports(dir: &Path, reports: &[EvalReport]) -> Result<()> {
    write_text(&dir.join("reports.csv"), &reports_csv(reports))?;
    write_text(&dir.join("reports.jsonl"), &reports_jsonl(reports))
}

fn read_reports(dir: &Path) -> Result<Vec<EvalReport>> {
    let path = dir.join("reports.jsonl");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .map(|l| serde_json::from_str(l).with_context(|| format!("parsing {}", path.display())))
        .collect()
}
