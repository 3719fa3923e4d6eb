use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use trafficlm::detect::{
    build_examples, detect, finetune, labels_to_csv, parse_labels_csv, report, select_threshold, window_states,
    AttackLabel, BuildStats, DetectionExample, HeadExample, SurvivalHead, ThresholdChoice,
};
use trafficlm::discretize::{fit_all, transform};
use trafficlm::flow::{Accumulator, FlowReader, MinuteSpan, NodeRegistry};
use trafficlm::model::{ModelCheckpoint, VocabularyMap};
use trafficlm::schema::FeatureSchema;
use trafficlm::synth::write_csv;
use trafficlm::tensor::{sidecar_paths, RawTensor, TensorHeader, TokenTensor};
use trafficlm::train::{evaluate, pretrain, BigramModel, EvalMetrics};

use crate::config::{Digests, PipelineConfig};
use crate::error::{CliError, Result};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
const DISCRETIZER: &str = "discretizer.json";
const CHECKPOINT: &str = "model.ckpt";
const HISTORY: &str = "history.json";
const METRICS: &str = "metrics.json";
const HEAD: &str = "head.json";
const DETECTIONS: &str = "detections.json";
const REPORT: &str = "report.json";

/// Fine-tuned head plus the threshold chosen on the validation split.
#[derive(Debug, Serialize, Deserialize)]
struct HeadArtifact {
    schema_hash: String,
    config_digest: String,
    threshold: ThresholdChoice,
    build: BuildStats,
    head: SurvivalHead,
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectionsArtifact {
    schema_hash: String,
    config_digest: String,
    tau: f64,
    examples: Vec<DetectionExample>,
    detections: Vec<Option<usize>>,
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    schema: FeatureSchema,
    digests: Digests,
}

impl Ctx<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.cfg.paths.artifact(name)
    }

    fn check(&self, artifact: &Path, schema_hash: &str, digest: &str, expected: &str) -> Result<()> {
        let own = self.schema.hash();
        if schema_hash != own {
            return Err(trafficlm::Error::SchemaMismatch {
                expected: own,
                found: schema_hash.to_string(),
            }
            .into());
        }
        if digest != expected {
            return Err(CliError::DigestMismatch {
                artifact: artifact.to_path_buf(),
                expected: expected.to_string(),
                found: digest.to_string(),
            });
        }
        Ok(())
    }

    fn raw(&self, split: &str) -> Result<RawTensor> {
        let base = self.path(&format!("raw_{split}"));
        let (t, h) = RawTensor::load(&base)?;
        self.check_tensor(&base, &h, &self.digests.ingest)?;
        Ok(t)
    }

    fn tokens(&self, split: &str) -> Result<TokenTensor> {
        let base = self.path(&format!("tokens_{split}"));
        let (t, h) = TokenTensor::load(&base)?;
        self.check_tensor(&base, &h, &self.digests.discretize)?;
        Ok(t)
    }

    fn check_tensor(&self, base: &Path, h: &TensorHeader, expected: &str) -> Result<()> {
        self.check(&sidecar_paths(base).0, &h.schema_hash, &h.config_digest, expected)
    }

    fn checkpoint(&self) -> Result<ModelCheckpoint> {
        let path = self.path(CHECKPOINT);
        let ck = ModelCheckpoint::load(&path)?;
        self.check(&path, &ck.schema_hash, &ck.config_digest, &self.digests.pretrain)?;
        Ok(ck)
    }

    fn registry(&self) -> Result<NodeRegistry> {
        Ok(NodeRegistry::parse_csv(open(&self.cfg.paths.registry())?)?)
    }

    fn labels(&self) -> Result<Vec<AttackLabel>> {
        Ok(parse_labels_csv(open(&self.cfg.paths.labels())?)?)
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    match File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(trafficlm::Error::MissingArtifact(path.to_path_buf()).into())
        }
        Err(e) => Err(e.into()),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(open(path)?)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

/// Runs one stage and returns its summary line.
pub fn run(stage: &str, cfg: &PipelineConfig) -> Result<Value> {
    fs::create_dir_all(&cfg.paths.workdir)?;
    let ctx = Ctx {
        cfg,
        schema: FeatureSchema::new(cfg.schema),
        digests: Digests::of(cfg),
    };
    let summary = match stage {
        "gen-synthetic" => gen_synthetic(&ctx)?,
        "ingest" => ingest(&ctx)?,
        "discretize" => discretize(&ctx)?,
        "pretrain" => run_pretrain(&ctx)?,
        "evaluate" => run_evaluate(&ctx)?,
        "finetune" => run_finetune(&ctx)?,
        "detect" => run_detect(&ctx)?,
        "report" => run_report(&ctx)?,
        other => return Err(CliError::Usage(format!("unknown stage {other:?}"))),
    };
    let mut line = json!({ "stage": stage });
    line.as_object_mut()
        .expect("object")
        .extend(summary.as_object().cloned().unwrap_or_default());
    Ok(line)
}

fn gen_synthetic(ctx: &Ctx) -> Result<Value> {
    let paths = &ctx.cfg.paths;
    let flows = paths.flows();
    let mut out = BufWriter::new(File::create(&flows)?);
    let synth = write_csv(&ctx.cfg.synth, &mut out)?;
    out.flush()?;
    fs::write(paths.registry(), synth.registry.to_csv())?;
    let labels = synth.truth.labels();
    fs::write(paths.labels(), labels_to_csv(&labels))?;
    Ok(json!({
        "flows": flows,
        "nodes": synth.registry.node_count(),
        "customers": synth.registry.customer_count(),
        "minutes": ctx.cfg.synth.minutes,
        "start_minute": ctx.cfg.synth.start_minute(),
        "attacks": labels.len(),
    }))
}

fn ingest(ctx: &Ctx) -> Result<Value> {
    let registry = ctx.registry()?;
    let flows = ctx.cfg.paths.flows();
    let (start, minutes) = match ctx.cfg.span {
        Some(s) => (s.start_minute, s.minutes),
        None => {
            let mut range: Option<(u64, u64)> = None;
            for r in FlowReader::new(open(&flows)?)? {
                let m = r?.minute();
                range = Some(range.map_or((m, m), |(a, b)| (a.min(m), b.max(m))));
            }
            let (a, b) = range.ok_or(trafficlm::Error::Empty("flow file has no records"))?;
            (a, b - a + 1)
        }
    };
    let bounds = ctx.cfg.splits.bounds(minutes)?;
    let spans = bounds
        .windows(2)
        .map(|w| MinuteSpan::new(start + w[0], start + w[1]))
        .collect::<trafficlm::Result<Vec<_>>>()?;
    let mut accs: Vec<Accumulator> = spans.iter().map(|s| Accumulator::new(&registry, &ctx.schema, *s)).collect();
    let mut records = 0u64;
    for r in FlowReader::new(open(&flows)?)? {
        let r = r?;
        records += 1;
        for a in &mut accs {
            a.add(&r);
        }
    }
    let mut used = 0;
    for (acc, split) in accs.into_iter().zip(SPLITS) {
        let (raw, stats) = acc.finish();
        used += stats.used;
        raw.save(&ctx.path(&format!("raw_{split}")), &ctx.digests.ingest)?;
    }
    Ok(json!({
        "records": records,
        "records_used": used,
        "nodes": registry.node_count(),
        "start_minute": start,
        "split_minutes": bounds.windows(2).map(|w| w[1] - w[0]).collect::<Vec<_>>(),
        "schema_hash": ctx.schema.hash(),
        "config_digest": ctx.digests.ingest,
    }))
}

fn discretize(ctx: &Ctx) -> Result<Value> {
    let train = ctx.raw("train")?;
    let mut disc = fit_all(&train, ctx.cfg.n_bins)?;
    disc.config_digest = ctx.digests.discretize.clone();
    fs::write(ctx.path(DISCRETIZER), disc.to_json()?)?;
    let mut effective = 0usize;
    let mut cells = 0usize;
    for c in disc.cutoffs.iter().flatten() {
        effective += c.effective_bins();
        cells += 1;
    }
    for split in SPLITS {
        let raw = if split == "train" { train.clone() } else { ctx.raw(split)? };
        transform(&raw, &disc)?.save(&ctx.path(&format!("tokens_{split}")), &ctx.digests.discretize)?;
    }
    Ok(json!({
        "n_bins": disc.n_bins,
        "mean_effective_bins": effective as f64 / cells.max(1) as f64,
        "schema_hash": disc.schema_hash,
        "config_digest": disc.config_digest,
    }))
}

fn vocab(registry: &NodeRegistry) -> VocabularyMap {
    VocabularyMap {
        node_ips: (0..registry.node_count()).map(|i| registry.ip_of(i).to_string()).collect(),
        node_customers: registry.customers().to_vec(),
    }
}

fn run_pretrain(ctx: &Ctx) -> Result<Value> {
    let train = ctx.tokens("train")?;
    let val = ctx.tokens("val")?;
    let registry = ctx.registry()?;
    let model_cfg = ctx
        .cfg
        .model
        .config(train.features(), train.n_bins, registry.node_count(), registry.customer_count());
    let mut out = pretrain(&train, &val, &vocab(&registry), &model_cfg, &ctx.cfg.train, |e| {
        eprintln!("{}", serde_json::to_string(e).unwrap_or_default());
    })?;
    out.checkpoint.config_digest = ctx.digests.pretrain.clone();
    out.checkpoint.save(&ctx.path(CHECKPOINT))?;
    write_json(&ctx.path(HISTORY), &out.history)?;
    let t = &out.checkpoint.training;
    Ok(json!({
        "epochs": t.epochs,
        "steps": t.steps,
        "best_epoch": t.best_epoch,
        "best_val_loss": t.best_val_loss,
        "best_val_ppl": t.best_val_loss.map(f64::exp),
        "parameters": out.checkpoint.model.params.parameter_count(),
        "config_digest": out.checkpoint.config_digest,
    }))
}

fn run_evaluate(ctx: &Ctx) -> Result<Value> {
    let ck = ctx.checkpoint()?;
    let train = ctx.tokens("train")?;
    let bigram = BigramModel::fit(&train);
    let mut out = serde_json::Map::new();
    for split in ["val", "test"] {
        let tokens = ctx.tokens(split)?;
        let model: EvalMetrics = evaluate(&ck, &tokens)?;
        let base = bigram.evaluate(&tokens, ck.model.config.max_len)?;
        out.insert(format!("{split}_ppl"), json!(model.ppl));
        out.insert(format!("{split}_accuracy"), json!(model.accuracy));
        out.insert(format!("{split}_bigram_ppl"), json!(base.ppl));
        out.insert(format!("{split}_bigram_accuracy"), json!(base.accuracy));
    }
    out.insert("config_digest".into(), json!(ck.config_digest));
    let value = Value::Object(out);
    write_json(&ctx.path(METRICS), &value)?;
    Ok(value)
}

/// Examples of one split with the backbone states of their windows.
fn split_examples(
    ctx: &Ctx,
    ck: &ModelCheckpoint,
    split: &str,
) -> Result<(Vec<DetectionExample>, Vec<HeadExample>, BuildStats)> {
    let raw = ctx.raw(split)?;
    let tokens = ctx.tokens(split)?;
    let registry = ctx.registry()?;
    let customers = registry.customers();
    if customers != ck.vocab.node_customers.as_slice() {
        return Err(CliError::Validation("node registry differs from the checkpoint vocabulary".into()));
    }
    let (examples, stats) = build_examples(
        &raw,
        &tokens,
        &ctx.schema,
        &ctx.labels()?,
        customers,
        &ctx.cfg.detect.window,
    )?;
    let identity: Vec<usize> = (0..registry.node_count()).collect();
    let states = window_states(&ck.model, &tokens, &examples, &identity, customers)?;
    let head_examples = states
        .into_iter()
        .zip(&examples)
        .map(|(hidden, e)| HeadExample {
            hidden,
            marks: e.marks.clone(),
        })
        .collect();
    Ok((examples, head_examples, stats))
}

fn run_finetune(ctx: &Ctx) -> Result<Value> {
    let ck = ctx.checkpoint()?;
    let d = &ctx.cfg.detect;
    let (examples, train, build) = split_examples(ctx, &ck, "val")?;
    let head = finetune(&train, &d.finetune, |_, _| {})?;
    let curves: Vec<Vec<f64>> = train.iter().map(|e| head.survival(&e.hidden)).collect();
    let threshold = select_threshold(&examples, &curves, d.overhead_cap, d.customer_pct)?;
    let artifact = HeadArtifact {
        schema_hash: ck.schema_hash.clone(),
        config_digest: ctx.digests.finetune.clone(),
        threshold,
        build,
        head,
    };
    write_json(&ctx.path(HEAD), &artifact)?;
    Ok(json!({
        "examples": examples.len(),
        "attacks": artifact.build.attacks,
        "tau": artifact.threshold.tau,
        "feasible": artifact.threshold.feasible,
        "val_effectiveness": artifact.threshold.mean_effectiveness,
        "config_digest": artifact.config_digest,
    }))
}

fn run_detect(ctx: &Ctx) -> Result<Value> {
    let path = ctx.path(HEAD);
    let head: HeadArtifact = read_json(&path)?;
    ctx.check(&path, &head.schema_hash, &head.config_digest, &ctx.digests.finetune)?;
    let ck = ctx.checkpoint()?;
    let (examples, states, _) = split_examples(ctx, &ck, "test")?;
    let tau = head.threshold.tau;
    let detections: Vec<Option<usize>> =
        states.iter().map(|e| detect(&head.head.survival(&e.hidden), tau)).collect();
    let flagged = detections.iter().filter(|d| d.is_some()).count();
    let artifact = DetectionsArtifact {
        schema_hash: head.schema_hash,
        config_digest: head.config_digest,
        tau,
        examples,
        detections,
    };
    write_json(&ctx.path(DETECTIONS), &artifact)?;
    Ok(json!({
        "examples": artifact.examples.len(),
        "flagged": flagged,
        "tau": tau,
        "config_digest": artifact.config_digest,
    }))
}

fn run_report(ctx: &Ctx) -> Result<Value> {
    let path = ctx.path(DETECTIONS);
    let d: DetectionsArtifact = read_json(&path)?;
    ctx.check(&path, &d.schema_hash, &d.config_digest, &ctx.digests.finetune)?;
    let r = report(&d.examples, &d.detections, d.tau)?;
    write_json(&ctx.path(REPORT), &r)?;
    eprint!("{}", r.to_table());
    Ok(json!({
        "tau": r.threshold,
        "f1": r.f1,
        "fpr": r.fpr,
        "fnr": r.fnr,
        "effectiveness": r.effectiveness,
        "overhead": r.overhead,
        "median_mitigation": r.median_mitigation,
        "config_digest": d.config_digest,
    }))
}
