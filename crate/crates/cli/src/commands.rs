use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use e2p_core::checkpoint::bytes_digest;
use e2p_core::data::synth::{self, Oracle, Splits, Tagged};
use e2p_core::data::tokenizer::EOT;
use e2p_core::data::{load_jsonl, pretraining_sequences, write_jsonl};
use e2p_core::eval::{self, Candidate, EvalContext, EvalItem, HitrateConfig, RougeVariant};
use e2p_core::lm::pretrain as pretrain_lm;
use e2p_core::prefix::ProjectionMeta;
use e2p_core::{
    train_e2p as fit_projection, BaselineKind, Checkpoint, E2pExample, EvalReport, FrozenLm, LmRecord, Metric,
    Objective, PrefRecord, Projection,
};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{RunConfig, Task};
use crate::Exit;

const SPLITS: [&str; 3] = ["train", "dev", "test"];

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(bytes_digest(&bytes))
}

/// Persists the resolved configuration next to a command's outputs.
fn snapshot(cfg: &RunConfig, dir: &Path, command: &str) -> Result<()> {
    let path = dir.join(format!("{command}.resolved.toml"));
    fs::write(&path, cfg.to_toml()).with_context(|| format!("writing {}", path.display()))
}

fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Exit::data(format!("{} not found; run `e2p {producer}` first", path.display())).into())
    }
}

#[derive(Serialize, Deserialize)]
struct OracleFile {
    task: Task,
    seed: u64,
    splits: Splits,
    oracle: Oracle,
}

fn write_splits<T: Serialize + Clone>(
    dir: &Path,
    records: &[Tagged<T>],
    splits: &Splits,
) -> Result<Vec<(String, String)>> {
    let mut digests = Vec::new();
    for (name, users) in SPLITS.iter().zip([&splits.train, &splits.dev, &splits.test]) {
        let path = dir.join(format!("{name}.jsonl"));
        let recs: Vec<T> = Splits::select(users, records).into_iter().map(|t| t.record).collect();
        write_jsonl(&path, &recs)?;
        info!("{}: {} records from {} users", path.display(), recs.len(), users.len());
        digests.push((format!("{name}.jsonl"), file_digest(&path)?));
    }
    Ok(digests)
}

pub fn synth(cfg: &RunConfig, force: bool) -> Result<()> {
    let dir = cfg.data_dir();
    let outputs = ["train.jsonl", "dev.jsonl", "test.jsonl", "oracle.json", "manifest.json"];
    if let Some(f) = outputs.iter().map(|f| dir.join(f)).find(|p| p.exists()) {
        if !force {
            return Err(Exit::config(format!("{} already exists; pass --force to overwrite", f.display())).into());
        }
    }
    create_dir(&dir)?;
    let pop = cfg.population();
    let splits = synth::split_users(pop.n_users, cfg.seed);
    let (mut files, oracle) = match cfg.task {
        Task::Lm => {
            let (recs, oracle) = synth::lm_corpus(&pop)?;
            (write_splits(&dir, &recs, &splits)?, oracle)
        }
        Task::Pref => {
            let (recs, oracle) = synth::pref_corpus(&pop)?;
            (write_splits(&dir, &recs, &splits)?, oracle)
        }
        Task::Rec => {
            let corpus = synth::rec_corpus(&pop, &cfg.rec())?;
            let mut files = write_splits(&dir, &corpus.records, &splits)?;
            let candidates: Vec<Candidate> = corpus
                .items
                .iter()
                .map(|it| Candidate {
                    embedding: it.embedding.clone(),
                    response: corpus.codebook.id_string(it.semantic_id),
                })
                .collect();
            let path = dir.join("candidates.jsonl");
            write_jsonl(&path, &candidates)?;
            files.push(("candidates.jsonl".into(), file_digest(&path)?));
            let path = dir.join("codebook.ckpt");
            corpus.codebook.to_checkpoint().save(&path)?;
            files.push(("codebook.ckpt".into(), file_digest(&path)?));
            (files, corpus.oracle)
        }
    };
    let path = dir.join("oracle.json");
    write_json(
        &path,
        &OracleFile {
            task: cfg.task,
            seed: cfg.seed,
            splits,
            oracle,
        },
    )?;
    files.push(("oracle.json".into(), file_digest(&path)?));
    let files: serde_json::Map<String, serde_json::Value> = files.into_iter().map(|(k, v)| (k, v.into())).collect();
    write_json(
        &dir.join("manifest.json"),
        &json!({ "seed": cfg.seed, "config_digest": cfg.digest(), "files": files }),
    )?;
    snapshot(cfg, &dir, "synth")?;
    println!("wrote {} task data to {}", task_name(cfg.task), dir.display());
    Ok(())
}

fn task_name(t: Task) -> &'static str {
    match t {
        Task::Lm => "lm",
        Task::Pref => "pref",
        Task::Rec => "rec",
    }
}

fn load_prefs(path: &Path, positives_only: bool) -> Result<Vec<PrefRecord>> {
    let mut recs: Vec<PrefRecord> = load_jsonl(path)?;
    if positives_only {
        recs.retain(|r| r.label == 1);
    }
    Ok(recs)
}

pub fn pretrain(cfg: &RunConfig) -> Result<()> {
    let train = cfg.train_file();
    require(&train, "synth")?;
    let texts: Vec<String> = match cfg.task {
        Task::Lm | Task::Rec => load_jsonl::<LmRecord>(&train)?.into_iter().map(|r| r.text).collect(),
        Task::Pref => load_prefs(&train, true)?
            .into_iter()
            .map(|r| format!("{}{}", r.prompt, r.completion))
            .collect(),
    };
    let seqs = pretraining_sequences(texts.iter().map(String::as_str), cfg.profile_keep_prob, cfg.seed);
    let (lm, report) = pretrain_lm(&seqs, &cfg.lm(), &cfg.pretrain())?;
    let dir = cfg.checkpoint_dir();
    create_dir(&dir)?;
    let train_digest = file_digest(&train)?;
    let ck = lm.to_checkpoint(json!({
        "seed": cfg.seed,
        "train_digest": train_digest,
        "config_digest": cfg.digest(),
    }))?;
    ck.save(&cfg.lm_checkpoint())?;
    write_json(
        &dir.join("pretrain-report.json"),
        &json!({ "seed": cfg.seed, "train_digest": train_digest, "report": report }),
    )?;
    snapshot(cfg, &dir, "pretrain")?;
    println!(
        "pretrained on {} sequences, final loss {:.4}, lm digest {}",
        report.sequences,
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        lm.digest()
    );
    Ok(())
}

fn load_lm(cfg: &RunConfig) -> Result<FrozenLm> {
    let path = cfg.lm_checkpoint();
    require(&path, "pretrain")?;
    Ok(FrozenLm::from_checkpoint(&Checkpoint::load(&path)?)?)
}

/// Loads φ and refuses when it was trained against a different LM.
fn load_phi(cfg: &RunConfig, lm: &FrozenLm) -> Result<(Projection, ProjectionMeta)> {
    let path = cfg.phi_checkpoint();
    require(&path, "train-e2p")?;
    let (phi, meta) = Projection::from_checkpoint(&Checkpoint::load(&path)?, None)?;
    if meta.lm_digest != lm.digest() {
        return Err(Exit::contract(format!(
            "{} was trained against lm {} but {} holds lm {}; re-run `e2p train-e2p` to retrain it against this lm",
            path.display(),
            meta.lm_digest,
            cfg.lm_checkpoint().display(),
            lm.digest()
        ))
        .into());
    }
    Ok((phi, meta))
}

pub fn train_e2p(cfg: &RunConfig) -> Result<()> {
    let lm = load_lm(cfg)?;
    let objective: Objective = cfg.objective.parse()?;
    let train = cfg.train_file();
    require(&train, "synth")?;
    let data: Vec<E2pExample> = match (cfg.task, objective) {
        (Task::Pref, Objective::Kto) => load_prefs(&train, false)?
            .iter()
            .map(|r| E2pExample::from_pref(r, false))
            .collect(),
        (Task::Pref, Objective::Lm) => load_prefs(&train, true)?
            .iter()
            .map(|r| E2pExample::from_pref(r, false))
            .collect(),
        (_, Objective::Lm) => load_jsonl::<LmRecord>(&train)?
            .iter()
            .map(|r| E2pExample::from_lm(r, false))
            .collect(),
        (_, Objective::Kto) => {
            return Err(Exit::config("the kto objective needs labeled preference data (task = \"pref\")").into())
        }
    };
    let tc = cfg.train()?;
    let (phi, report) = fit_projection(&lm, &data, objective, &tc)?;
    let meta = ProjectionMeta {
        objective,
        alpha: tc.alpha,
        lm_digest: lm.digest().to_owned(),
        seed: cfg.seed,
    };
    let train_digest = file_digest(&train)?;
    let mut ck = phi.to_checkpoint(&meta);
    if let Some(h) = ck.header.as_object_mut() {
        h.insert("train_digest".into(), train_digest.clone().into());
        h.insert("config_digest".into(), cfg.digest().into());
    }
    let dir = cfg.checkpoint_dir();
    create_dir(&dir)?;
    ck.save(&cfg.phi_checkpoint())?;
    write_json(
        &dir.join("train-report.json"),
        &json!({ "seed": cfg.seed, "train_digest": train_digest, "report": report }),
    )?;
    snapshot(cfg, &dir, "train-e2p")?;
    println!(
        "trained projection on {} examples ({objective}), final loss {:.4}, phi digest {}",
        data.len(),
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        report.phi_digest
    );
    Ok(())
}

fn parse_metric(cfg: &RunConfig, name: &str) -> Result<Metric> {
    let lower = name.to_ascii_lowercase();
    if lower == "perplexity" {
        return Ok(Metric::Perplexity);
    }
    if lower == "hitrate" || lower.starts_with("hitrate@") {
        let k = match lower.strip_prefix("hitrate@") {
            Some(k) => k
                .parse()
                .map_err(|_| Exit::config(format!("bad hitrate cutoff in `{name}`")))?,
            None => cfg.hitrate_k,
        };
        return Ok(Metric::Hitrate(HitrateConfig {
            k,
            temperature: cfg.temperature,
            stop_token: Some(EOT),
        }));
    }
    if lower.starts_with("rouge") {
        return Ok(Metric::Rouge {
            variant: lower.parse::<RougeVariant>()?,
            temperature: cfg.temperature,
            max_new_tokens: cfg.max_new_tokens.unwrap_or(cfg.target_len),
        });
    }
    Err(Exit::config(format!("unknown metric `{name}` (perplexity, rouge-1, rouge-2, rouge-l or hitrate)")).into())
}

fn report_path(dir: &Path, baseline: &str, metric: &str) -> PathBuf {
    dir.join(format!("{baseline}.{metric}.json"))
}

fn load_candidates(path: &Path) -> Result<Vec<Candidate>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Exit::data(format!("{}: line {}: {e}", path.display(), i + 1)).into())
        })
        .collect()
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let kinds = cfg
        .baselines()
        .iter()
        .map(|b| b.parse::<BaselineKind>())
        .collect::<e2p_core::Result<Vec<_>>>()?;
    let metrics = cfg
        .metrics()
        .iter()
        .map(|m| parse_metric(cfg, m))
        .collect::<Result<Vec<_>>>()?;
    let lm = load_lm(cfg)?;
    let phi = if kinds.iter().any(|k| k.uses_prefix()) {
        Some(load_phi(cfg, &lm)?.0)
    } else {
        None
    };
    let test = cfg.test_file();
    require(&test, "synth")?;
    let items: Vec<EvalItem> = match cfg.task {
        Task::Lm | Task::Rec => load_jsonl::<LmRecord>(&test)?.iter().map(EvalItem::from_lm).collect(),
        Task::Pref => load_prefs(&test, true)?.iter().map(EvalItem::from_pref).collect(),
    };
    let candidates = if kinds.contains(&BaselineKind::EmbeddingRetrieval) {
        let path = cfg.data_dir().join("candidates.jsonl");
        require(&path, "synth")?;
        Some(load_candidates(&path)?)
    } else {
        None
    };
    let dir = cfg.report_dir();
    create_dir(&dir)?;
    let data_digest = file_digest(&test)?;
    let mut reports: Vec<EvalReport> = Vec::new();
    for metric in &metrics {
        let ctx = EvalContext {
            lm: lm.model(),
            phi: phi.as_ref(),
            items: &items,
            candidates: candidates.as_deref(),
            metric: metric.clone(),
            seed: cfg.seed,
            config_digest: cfg.digest(),
            data_digest: data_digest.clone(),
        };
        for &kind in &kinds {
            if kind == BaselineKind::EmbeddingRetrieval && !matches!(metric, Metric::Hitrate(_)) {
                info!("skipping {kind} for {}: it only produces hit rates", metric.name());
                continue;
            }
            let report = eval::run_baseline(kind, &ctx)?;
            info!("{kind} {}: {:.4}", report.metric, report.aggregate);
            write_json(&report_path(&dir, kind.name(), &report.metric), &report)?;
            reports.push(report);
        }
    }
    lm.verify()?;
    let mut table = eval::comparison_table(&reports)?;
    print!("{table}");
    table.push_str(&format!("\n<!-- seed {}, test data {} -->\n", cfg.seed, data_digest));
    fs::write(dir.join("comparison.md"), table)?;
    snapshot(cfg, &dir, "eval")?;
    Ok(())
}

#[derive(Serialize)]
struct TTestFile<'a> {
    a: &'a str,
    b: &'a str,
    metric: &'a str,
    seed: u64,
    data_digest: &'a str,
    result: eval::TTest,
}

pub fn ttest(cfg: &RunConfig, a: &str, b: &str, metric: Option<&str>) -> Result<()> {
    let metric = match metric {
        Some(m) => m.to_owned(),
        None => {
            let first = cfg.metrics().into_iter().next().unwrap_or_else(|| "perplexity".into());
            parse_metric(cfg, &first)?.name()
        }
    };
    let dir = cfg.report_dir();
    let load = |name: &str| -> Result<EvalReport> {
        let p = report_path(&dir, name, &metric);
        require(&p, "eval")?;
        read_json(&p)
    };
    let (ra, rb) = (load(a)?, load(b)?);
    if ra.data_digest != rb.data_digest {
        return Err(Exit::contract(format!(
            "{a} and {b} were scored on different test data ({} vs {}); re-run `e2p eval`",
            ra.data_digest, rb.data_digest
        ))
        .into());
    }
    let result = eval::paired_t_test(ra.scores()?, rb.scores()?)?;
    let marker = if result.significant { " †" } else { "" };
    println!(
        "{a} vs {b} on {metric}: mean difference {:.4}, t = {:.3}, df = {}, p = {:.3e}{marker}",
        result.mean_diff, result.t, result.df, result.p
    );
    write_json(
        &dir.join(format!("ttest.{a}.{b}.{metric}.json")),
        &TTestFile {
            a,
            b,
            metric: &metric,
            seed: cfg.seed,
            data_digest: &ra.data_digest,
            result,
        },
    )?;
    snapshot(cfg, &dir, "ttest")?;
    Ok(())
}

pub fn export_prefix_space(cfg: &RunConfig) -> Result<()> {
    let lm = load_lm(cfg)?;
    let (phi, _) = load_phi(cfg, &lm)?;
    let oracle_path = cfg.data_dir().join("oracle.json");
    require(&oracle_path, "synth")?;
    let file: OracleFile = read_json(&oracle_path)?;
    let embeddings: Vec<Vec<f64>> = file.oracle.users.iter().map(|u| u.embedding.clone()).collect();
    let clusters: Vec<usize> = file.oracle.users.iter().map(|u| u.cluster).collect();
    let dir = cfg.report_dir();
    create_dir(&dir)?;
    let csv = dir.join("prefix_space.csv");
    let ex = eval::export_prefix_space(&phi, &embeddings, &clusters, &csv)?;
    write_json(
        &dir.join("prefix_space.json"),
        &json!({
            "seed": cfg.seed,
            "phi_digest": phi.digest(),
            "oracle_digest": file_digest(&oracle_path)?,
            "n": ex.n,
            "k": ex.k,
            "embedding_agreement": ex.embedding_agreement,
            "prefix_agreement": ex.prefix_agreement,
        }),
    )?;
    snapshot(cfg, &dir, "export-prefix-space")?;
    println!(
        "{} users: {}-NN cluster agreement {:.3} in embedding space, {:.3} in prefix space; wrote {}",
        ex.n,
        ex.k,
        ex.embedding_agreement,
        ex.prefix_agreement,
        csv.display()
    );
    Ok(())
}
