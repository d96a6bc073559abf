//! Pipeline stages. Each reads its inputs from the output directory, writes
//! its artifacts there and records them in the manifest.
//!
//! ```text
//! config.toml                      effective configuration
//! manifest.json                    stage fingerprints and artifact hashes
//! corpus/corpus.jsonl, stats.json  ingest
//! grounding/summaries.jsonl        ground
//! grounding/images/<study>/*.png   ground
//! prompts/index.jsonl, bundles/    render
//! generations/<model>.jsonl        generate (cache under generations/cache/)
//! scores/                          score
//! report/                          report
//! eval/                            eval-serve session store
//! ```

use crate::config::{ConfigError, LoadedConfig};
use crate::manifest::{out_err, Manifest, OutputError, StageWriter};
use lookmark::aggregate_fixation_times;
use lookmark::clock::{Clock, FixedClock, SystemClock};
use lookmark::corpus::{
    compute_corpus_stats, export_canonical, read_canonical, read_sidecar, resolve_image_path,
    CorpusError, CorpusSources, StudyRecord,
};
use lookmark::digest::{canonical_json, hash_fields, sha256_hex};
use lookmark::experteval::{create_session, EvalError, Generation, SessionStore};
use lookmark::genclient::{
    builtin_adapters, run_batch, CacheError, GenerationCache, GenerationRecord,
};
use lookmark::grounding::{
    encode_png, load_image, render_box_overlay, render_fixation_heatmap, RenderError,
};
use lookmark::metrics::{
    build_scorer, builtin_pair_metrics, chart_data_csv, chart_points, delta_csv, delta_report,
    format_results_table, metric_columns, metric_rows_csv, normalized_averages, render_chart_svg,
    AggregateError, MetricRow, ScoreItem, ScorerError,
};
use lookmark::promptkit::{
    build_prompt, check_disjoint, fixation_summary_text, read_exemplar_pool, select_exemplars,
    BundleStore, MethodFlags, PromptBundle, PromptError, PromptTemplate, EXEMPLAR_COUNT,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const TOKENIZATION: &str = "lowercase; split on non-alphanumeric runs; no stemming";

#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Output(#[from] OutputError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Failed(String),
    #[error("nothing to report: {0}")]
    NothingToReport(String),
}

pub struct Ctx {
    pub cfg: LoadedConfig,
    pub out: PathBuf,
    pub config_hash: String,
    pub force: bool,
    pub clock: Arc<dyn Clock>,
}

fn file_sha(path: &Path) -> Result<String, OutputError> {
    std::fs::read(path)
        .map(sha256_hex)
        .map_err(|e| out_err(path, e))
}

fn to_json<T: Serialize + ?Sized>(v: &T) -> String {
    canonical_json(v).expect("serializable")
}

/// Study ids and model names become path components.
pub fn safe_component(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut s = String::new();
    for it in items {
        s.push_str(&to_json(&it));
        s.push('\n');
    }
    s
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, OutputError> {
    let text = std::fs::read_to_string(path).map_err(|e| out_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| out_err(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

impl Ctx {
    pub fn new(cfg: LoadedConfig, force: bool) -> Result<Self, StageError> {
        let clock: Arc<dyn Clock> = match &cfg.config.fixed_time {
            Some(t) => {
                Arc::new(FixedClock::parse(t).map_err(|e| StageError::Failed(e.to_string()))?)
            }
            None => Arc::new(SystemClock),
        };
        Ok(Self {
            out: cfg.out_dir.clone(),
            config_hash: cfg.config.hash(),
            cfg,
            force,
            clock,
        })
    }

    /// Opens the manifest and writes the effective config copy.
    pub fn prepare(&self) -> Result<Manifest, StageError> {
        std::fs::create_dir_all(&self.out).map_err(|e| out_err(&self.out, e))?;
        let mut m = Manifest::load(&self.out)?;
        m.config_hash = self.config_hash.clone();
        m.tokenization = TOKENIZATION.into();
        m.multi_ref_policy = to_json(&self.cfg.config.metrics.multi_ref_policy)
            .trim_matches('"')
            .to_string();
        if !m.is_current(&self.out, "config", &self.config_hash) {
            let mut w = StageWriter::new(&self.out);
            w.write("config.toml", self.cfg.config.to_toml().as_bytes())?;
            w.finish(
                &mut m,
                "config",
                self.config_hash.clone(),
                &self.config_hash,
                None,
            )?;
        } else {
            m.save(&self.out)?;
        }
        Ok(m)
    }

    fn skip(&self, m: &Manifest, stage: &str, fp: &str) -> bool {
        let current = !self.force && m.is_current(&self.out, stage, fp);
        if current {
            log::info!("{stage}: up to date");
        }
        current
    }

    fn upstream(&self, m: &Manifest, stage: &str, needed_by: &str) -> Result<String, StageError> {
        m.fingerprint(stage)
            .filter(|f| !f.is_empty())
            .map(str::to_string)
            .ok_or_else(|| {
                StageError::Failed(format!(
                    "{needed_by} needs `{stage}` to have completed first"
                ))
            })
    }

    fn corpus_path(&self) -> PathBuf {
        self.out.join("corpus/corpus.jsonl")
    }

    fn load_corpus(&self) -> Result<Vec<StudyRecord>, StageError> {
        let path = self.corpus_path();
        let text = std::fs::read_to_string(&path).map_err(|e| out_err(&path, e))?;
        Ok(read_canonical(&text, &path)?)
    }

    fn image_root(&self) -> PathBuf {
        let images = self.cfg.resolve(&self.cfg.config.corpus.images);
        images.parent().map(Path::to_path_buf).unwrap_or_default()
    }

    fn study_image(&self, r: &StudyRecord) -> Result<image::RgbImage, StageError> {
        Ok(load_image(&resolve_image_path(
            &self.image_root(),
            &r.image_path,
        ))?)
    }
}

pub fn ingest(ctx: &Ctx, m: &mut Manifest) -> Result<(), StageError> {
    let c = &ctx.cfg.config.corpus;
    let sources = ctx.cfg.sources();
    let src = CorpusSources::open(&sources, &c.adapter)?;
    let mut parts = vec!["ingest".to_string(), to_json(c)];
    for p in [
        &sources.boxes,
        &sources.fixations,
        &sources.reports,
        &sources.images,
    ] {
        parts.push(file_sha(p)?);
    }
    for (id, p) in src.image_paths() {
        parts.push(id);
        parts.push(file_sha(&p).unwrap_or_else(|_| "missing".into()));
    }
    let sidecar_path = c.sidecar.as_ref().map(|p| ctx.cfg.resolve(p));
    if let Some(p) = &sidecar_path {
        parts.push(file_sha(p)?);
    }
    let fp = hash_fields(parts.iter().map(String::as_str));
    if ctx.skip(m, "ingest", &fp) {
        return Ok(());
    }

    let corpus = src.load_corpus()?;
    lookmark::corpus::validate_corpus(&corpus)?;
    let sidecar = sidecar_path
        .map(|p| read_sidecar(&p, &c.adapter.sidecar))
        .transpose()?;
    let stats = compute_corpus_stats(&corpus, sidecar.as_ref())?;

    let mut w = StageWriter::new(&ctx.out);
    w.write("corpus/corpus.jsonl", export_canonical(&corpus).as_bytes())?;
    let mut stats_text = serde_json::to_string_pretty(&stats).expect("stats serialize");
    stats_text.push('\n');
    w.write("corpus/stats.json", stats_text.as_bytes())?;
    w.stat("studies", corpus.len());
    log::info!("ingest: {} studies", corpus.len());
    w.finish(m, "ingest", fp, &ctx.config_hash, None)?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryLine<'a> {
    study_id: &'a str,
    entries: &'a [lookmark::grounding::DwellEntry],
    unmapped_time_s: f64,
    total_time_s: f64,
    prompt_text: String,
}

pub fn ground(ctx: &Ctx, m: &mut Manifest) -> Result<(), StageError> {
    let up = ctx.upstream(m, "ingest", "ground")?;
    let spec = &ctx.cfg.config.render;
    let fp = hash_fields([
        "ground",
        up.as_str(),
        &file_sha(&ctx.corpus_path())?,
        &to_json(spec),
    ]);
    if ctx.skip(m, "ground", &fp) {
        return Ok(());
    }
    let corpus = ctx.load_corpus()?;
    let mut w = StageWriter::new(&ctx.out);
    let mut lines = Vec::new();
    for r in &corpus {
        let s = aggregate_fixation_times(&r.fixations, &r.boxes);
        lines.push(to_json(&SummaryLine {
            study_id: &r.study_id,
            entries: &s.entries,
            unmapped_time_s: s.unmapped_time_s,
            total_time_s: r.total_fixation_time(),
            prompt_text: fixation_summary_text(&s),
        }));
        let img = ctx.study_image(r)?;
        let dir = format!("grounding/images/{}", safe_component(&r.study_id));
        w.write(
            &format!("{dir}/boxes.png"),
            &encode_png(&render_box_overlay(&img, &r.boxes, spec))?,
        )?;
        w.write(
            &format!("{dir}/heatmap.png"),
            &encode_png(&render_fixation_heatmap(&img, &r.fixations, spec))?,
        )?;
    }
    let mut text = lines.join("\n");
    text.push('\n');
    w.write("grounding/summaries.jsonl", text.as_bytes())?;
    w.stat("studies", corpus.len());
    log::info!("ground: {} studies", corpus.len());
    w.finish(m, "ground", fp, &ctx.config_hash, None)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexLine {
    pub study_id: String,
    pub method: MethodFlags,
    pub digest: String,
}

pub fn render(ctx: &Ctx, m: &mut Manifest) -> Result<(), StageError> {
    let up = ctx.upstream(m, "ingest", "render")?;
    let c = &ctx.cfg.config;
    let template_text = match &c.prompt.template {
        Some(p) => {
            let p = ctx.cfg.resolve(p);
            std::fs::read_to_string(&p).map_err(|e| out_err(&p, e))?
        }
        None => lookmark::promptkit::DEFAULT_TEMPLATE.to_string(),
    };
    let pool_path = c.prompt.exemplar_pool.as_ref().map(|p| ctx.cfg.resolve(p));
    let needs_icl = c.methods.iter().any(|f| f.icl);
    let pool_sha = match (&pool_path, needs_icl) {
        (Some(p), true) => file_sha(p)?,
        _ => String::new(),
    };
    let methods: Vec<String> = c.methods.iter().map(MethodFlags::label).collect();
    let fp = hash_fields([
        "render",
        up.as_str(),
        &file_sha(&ctx.corpus_path())?,
        &to_json(&c.render),
        &methods.join(","),
        &template_text,
        &pool_sha,
        &c.seed.to_string(),
    ]);
    if ctx.skip(m, "render", &fp) {
        return Ok(());
    }

    let template = PromptTemplate::parse(&template_text)?;
    let corpus = ctx.load_corpus()?;
    let exemplars = match (&pool_path, needs_icl) {
        (Some(p), true) => {
            let chosen = select_exemplars(&read_exemplar_pool(p)?, EXEMPLAR_COUNT, c.seed)?;
            check_disjoint(&chosen, &corpus)?;
            chosen
        }
        _ => Vec::new(),
    };

    let store = BundleStore::open(ctx.out.join("prompts/bundles"))?;
    let mut w = StageWriter::new(&ctx.out);
    let mut index = Vec::new();
    for r in &corpus {
        let img = ctx.study_image(r)?;
        for &flags in &c.methods {
            let b = build_prompt(r, &img, flags, &exemplars, &template, &c.render)?;
            store.put(&b)?;
            w.record(&format!("prompts/bundles/{}.json", b.digest))?;
            index.push(IndexLine {
                study_id: r.study_id.clone(),
                method: flags,
                digest: b.digest,
            });
        }
    }
    w.write("prompts/index.jsonl", jsonl(&index).as_bytes())?;
    let ids: Vec<&str> = exemplars.iter().map(|e| e.id.as_str()).collect();
    w.write(
        "prompts/exemplars.json",
        format!("{}\n", to_json(&ids)).as_bytes(),
    )?;
    w.stat("bundles", index.len());
    log::info!("render: {} prompt bundles", index.len());
    w.finish(m, "render", fp, &ctx.config_hash, None)?;
    Ok(())
}

fn generations_rel(model: &str) -> String {
    format!("generations/{}.jsonl", safe_component(model))
}

pub fn generate(ctx: &Ctx, m: &mut Manifest) -> Result<(), StageError> {
    let c = &ctx.cfg.config;
    if c.endpoints.is_empty() {
        return Err(StageError::Failed("no endpoints configured".into()));
    }
    let up = ctx.upstream(m, "render", "generate")?;
    let index_path = ctx.out.join("prompts/index.jsonl");
    let fp = hash_fields([
        "generate",
        up.as_str(),
        &file_sha(&index_path)?,
        &to_json(&c.endpoints),
    ]);
    if ctx.skip(m, "generate", &fp) {
        return Ok(());
    }

    let index: Vec<IndexLine> = read_jsonl(&index_path)?;
    let store = BundleStore::open(ctx.out.join("prompts/bundles"))?;
    let bundles: Vec<PromptBundle> = index
        .iter()
        .map(|l| {
            store.get(&l.digest)?.ok_or_else(|| {
                StageError::Failed(format!(
                    "prompt bundle {} missing; rerun `render`",
                    l.digest
                ))
            })
        })
        .collect::<Result<_, _>>()?;

    let adapters = builtin_adapters();
    let cache = GenerationCache::open(ctx.out.join("generations/cache"))?;
    let mut w = StageWriter::new(&ctx.out);
    let mut failures = Vec::new();
    for ep in &c.endpoints {
        let adapter = adapters
            .get(&ep.adapter)
            .map_err(|e| StageError::Failed(e.to_string()))?;
        let report = run_batch(
            &bundles,
            ep,
            adapter.as_ref(),
            &cache,
            c.concurrency,
            ctx.clock.as_ref(),
        )?;
        log::info!(
            "generate: {}: {} generated, {} cached, {} failed",
            ep.name,
            report.generated - report.failures.len(),
            report.cache_hits,
            report.failures.len()
        );
        for r in &report.records {
            let key = GenerationCache::key(ep, r.flags, &r.prompt_digest);
            w.record(&format!("generations/cache/{key}.json"))?;
        }
        w.write(
            &generations_rel(&ep.name),
            jsonl(&report.records).as_bytes(),
        )?;
        failures.extend(report.failures);
    }
    w.write("generations/failures.jsonl", jsonl(&failures).as_bytes())?;
    w.stat("failures", failures.len());
    let n_failed = failures.len();
    let fp = if n_failed == 0 { fp } else { String::new() };
    w.finish(
        m,
        "generate",
        fp,
        &ctx.config_hash,
        Some("generations/cache/"),
    )?;
    if n_failed > 0 {
        return Err(StageError::Failed(format!(
            "{n_failed} generation(s) failed; see generations/failures.jsonl and rerun to retry them"
        )));
    }
    Ok(())
}

fn load_generations(ctx: &Ctx) -> Result<Vec<GenerationRecord>, StageError> {
    let mut all = Vec::new();
    for ep in &ctx.cfg.config.endpoints {
        let path = ctx.out.join(generations_rel(&ep.name));
        if !path.is_file() {
            return Err(StageError::Failed(format!(
                "{} has no generations ({}); run `generate` first",
                ep.name,
                path.display()
            )));
        }
        all.extend(read_jsonl::<GenerationRecord>(&path)?);
    }
    Ok(all)
}

pub fn score(ctx: &Ctx, m: &mut Manifest) -> Result<(), StageError> {
    let c = &ctx.cfg.config;
    if c.scorers.is_empty() {
        return Err(StageError::Failed("no scorers configured".into()));
    }
    let sets = c.metrics.sets();
    for metric in sets.clinical.iter().chain(&sets.all) {
        if !c.scorers.iter().any(|s| &s.metric == metric) {
            return Err(StageError::Failed(format!(
                "metric {metric} is used in averages but has no scorer"
            )));
        }
    }
    let up = ctx.upstream(m, "generate", "score")?;
    let mut parts = vec![
        "score".to_string(),
        up,
        file_sha(&ctx.corpus_path())?,
        to_json(&c.scorers),
        to_json(&c.metrics),
    ];
    for ep in &c.endpoints {
        parts.push(file_sha(&ctx.out.join(generations_rel(&ep.name))).unwrap_or_default());
    }
    let fp = hash_fields(parts.iter().map(String::as_str));
    if ctx.skip(m, "score", &fp) {
        return Ok(());
    }

    let corpus = ctx.load_corpus()?;
    let refs: BTreeMap<&str, Vec<String>> = corpus
        .iter()
        .map(|r| {
            (
                r.study_id.as_str(),
                r.references.iter().map(|d| d.text.clone()).collect(),
            )
        })
        .collect();
    let records = load_generations(ctx)?;
    let items: Vec<ScoreItem> = records
        .iter()
        .map(|g| {
            let references = refs.get(g.study_id.as_str()).cloned().ok_or_else(|| {
                StageError::Failed(format!("generation for unknown study {}", g.study_id))
            })?;
            Ok(ScoreItem {
                id: format!("{}|{}|{}", g.model, g.flags.label(), g.study_id),
                candidate: g.output_text.clone(),
                references,
            })
        })
        .collect::<Result<_, StageError>>()?;

    let builtins = builtin_pair_metrics();
    let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for spec in &c.scorers {
        let scorer = build_scorer(spec, &builtins, c.metrics.multi_ref_policy)?;
        let scores = scorer.score_batch(&items)?;
        log::info!("score: {} scored {} items", spec.metric, scores.len());
        per_metric.insert(spec.metric.clone(), scores);
    }

    let metric_order: Vec<String> = c.scorers.iter().map(|s| s.metric.clone()).collect();
    let mut item_csv = String::from("model,method,study_id");
    for mname in &metric_order {
        item_csv.push(',');
        item_csv.push_str(mname);
    }
    item_csv.push('\n');
    for (i, g) in records.iter().enumerate() {
        item_csv.push_str(&format!("{},{},{}", g.model, g.flags.label(), g.study_id));
        for mname in &metric_order {
            item_csv.push_str(&format!(",{:.6}", per_metric[mname][i]));
        }
        item_csv.push('\n');
    }

    let mut rows = Vec::new();
    for ep in &c.endpoints {
        for &flags in &c.methods {
            let idx: Vec<usize> = records
                .iter()
                .enumerate()
                .filter(|(_, g)| g.model == ep.name && g.flags == flags)
                .map(|(i, _)| i)
                .collect();
            if idx.is_empty() {
                log::warn!("score: no generations for {} ({})", ep.name, flags.label());
                continue;
            }
            let scores = metric_order.iter().map(|mname| {
                let v = &per_metric[mname];
                (
                    mname.clone(),
                    idx.iter().map(|&i| v[i]).sum::<f64>() / idx.len() as f64,
                )
            });
            rows.push(MetricRow::new(ep.name.clone(), flags, scores));
        }
    }
    if rows.is_empty() {
        return Err(StageError::Failed("no generations to score".into()));
    }
    normalized_averages(&mut rows, &sets)?;

    let mut w = StageWriter::new(&ctx.out);
    w.write("scores/item_scores.csv", item_csv.as_bytes())?;
    let mut rows_json = serde_json::to_string_pretty(&rows).expect("rows serialize");
    rows_json.push('\n');
    w.write("scores/metric_rows.json", rows_json.as_bytes())?;
    w.write(
        "scores/metric_rows.csv",
        metric_rows_csv(&rows, &metric_columns(&rows, &sets)).as_bytes(),
    )?;
    w.stat("rows", rows.len());
    w.stat("items", items.len());
    w.finish(m, "score", fp, &ctx.config_hash, None)?;
    Ok(())
}

pub fn report(ctx: &Ctx, m: &mut Manifest) -> Result<(), StageError> {
    let path = ctx.out.join("scores/metric_rows.json");
    if !path.is_file() {
        return Err(StageError::NothingToReport(format!(
            "no scored rows at {}; run `score` first",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| out_err(&path, e))?;
    let rows: Vec<MetricRow> = serde_json::from_str(&text).map_err(|e| out_err(&path, e))?;
    if rows.is_empty() {
        return Err(StageError::NothingToReport(format!(
            "{} holds no rows",
            path.display()
        )));
    }
    let c = &ctx.cfg.config;
    let fp = hash_fields(["report", &sha256_hex(&text), &to_json(&c.metrics)]);
    if ctx.skip(m, "report", &fp) {
        return Ok(());
    }

    let baseline = c.metrics.baseline;
    let with_base: Vec<MetricRow> = rows
        .iter()
        .filter(|r| {
            rows.iter()
                .any(|b| b.model == r.model && b.flags == baseline)
        })
        .cloned()
        .collect();
    if with_base.len() < rows.len() {
        log::warn!(
            "report: models without a {} row get no deltas",
            baseline.label()
        );
    }
    let deltas = delta_report(&with_base, baseline)?;
    let sets = c.metrics.sets();
    let cols = metric_columns(&rows, &sets);
    let points = chart_points(&rows);

    let mut w = StageWriter::new(&ctx.out);
    w.write(
        "report/results.txt",
        format_results_table(&rows, &deltas, &cols, baseline).as_bytes(),
    )?;
    w.write(
        "report/results.csv",
        metric_rows_csv(&rows, &cols).as_bytes(),
    )?;
    w.write("report/deltas.csv", delta_csv(&deltas, &cols).as_bytes())?;
    w.write("report/chart_data.csv", chart_data_csv(&points).as_bytes())?;
    w.write(
        "report/a_avg_chart.svg",
        render_chart_svg(&points, "Change in A.AVG between methods").as_bytes(),
    )?;
    w.stat("rows", rows.len());
    w.finish(m, "report", fp, &ctx.config_hash, None)?;
    Ok(())
}

/// Opens the session store, creating the configured session from the
/// current generations when it does not exist yet.
pub fn open_eval_store(ctx: &Ctx) -> Result<Arc<SessionStore>, StageError> {
    let e = &ctx.cfg.config.eval;
    let store = SessionStore::open(ctx.out.join("eval"))?;
    if !store.session_ids().contains(&e.session_id) {
        let corpus = ctx.load_corpus()?;
        let by_id: BTreeMap<&str, &StudyRecord> =
            corpus.iter().map(|r| (r.study_id.as_str(), r)).collect();
        let root = ctx.image_root();
        let gens: Vec<Generation> = load_generations(ctx)?
            .into_iter()
            .filter_map(|g| {
                let r = by_id.get(g.study_id.as_str())?;
                Some(Generation {
                    study_id: g.study_id,
                    model: g.model,
                    flags: g.flags,
                    output_text: g.output_text,
                    references: r.references.iter().map(|d| d.text.clone()).collect(),
                    image_path: Some(resolve_image_path(&root, &r.image_path)),
                })
            })
            .collect();
        let (session, map) =
            create_session(&e.session_id, &gens, &e.annotators, ctx.cfg.config.seed)?;
        log::info!(
            "eval: created session {} with {} items",
            e.session_id,
            session.items.len()
        );
        store.create(session, map)?;
    }
    Ok(Arc::new(store))
}
