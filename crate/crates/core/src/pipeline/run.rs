use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use super::config::{CharInit, CorpusDecl, CorpusRole, LoadedConfig, MultitaskMode, StageSpec};
use super::{
    hash_file, sha256_hex, BoxError, DecodeChoice, DirectionMetrics, PipelineError, Result,
    RunManifest, Scores, StageSummary, MANIFEST_FILE,
};
use crate::corpus::{
    self, leading_tag, strip_phoneme_suffix, MixEntry, MixSpec, ParallelCorpus,
};
use crate::decode::{self, grid_search, rescore, translate, DevSet, NBestList};
use crate::eval;
use crate::g2p::G2PRuleSet;
use crate::model::{transfer_embeddings, Example, TrainOutcome, TrainPlan, Trainer, Transformer};
use crate::rng::derive;
use crate::subword::{self, SegmenterMode, SubwordModel};

const OUTPUT_DIRS: [&str; 6] = ["prepared", "segmenter", "checkpoints", "train", "decode", "rescore"];

fn at<E: Into<BoxError>>(stage: &'static str) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::stage(stage, e)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

fn lines_text<S: AsRef<str>>(lines: &[S]) -> String {
    lines.iter().fold(String::new(), |mut acc, l| {
        acc.push_str(l.as_ref());
        acc.push('\n');
        acc
    })
}

fn tagged(corpus: ParallelCorpus) -> corpus::Result<ParallelCorpus> {
    if corpus.pairs.iter().all(|p| p.is_tagged()) {
        Ok(corpus)
    } else {
        corpus::tag_corpus(&corpus)
    }
}

fn examples(corpus: &ParallelCorpus, seg: &SubwordModel, max_tokens: usize) -> Vec<Example> {
    let mut skipped = 0;
    let out: Vec<Example> = corpus
        .pairs
        .iter()
        .filter_map(|p| {
            let ex = Example {
                src: seg.encode(&p.source),
                tgt: seg.encode(&p.target),
            };
            if ex.src.len() > max_tokens || ex.tgt.len() > max_tokens {
                skipped += 1;
                None
            } else {
                Some(ex)
            }
        })
        .collect();
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} pairs longer than {max_tokens} tokens", corpus.name);
    }
    out
}

fn relative_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| PipelineError::io(dir, e))?.path();
        if path.is_dir() {
            relative_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("inside root");
            let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            out.push(parts.join("/"));
        }
    }
    Ok(())
}

fn scores(hyps: &[String], refs: &[String], cfg: &eval::MetricConfig) -> Result<Scores> {
    let report = eval::evaluate(hyps, refs, cfg).map_err(at("evaluate"))?;
    let exact = hyps
        .iter()
        .zip(refs)
        .filter(|(h, r)| corpus::normalize_whitespace(h) == corpus::normalize_whitespace(r))
        .count();
    Ok(Scores {
        bleu: report.bleu_score().unwrap_or(0.0),
        chrf: report.chrf.unwrap_or(0.0),
        exact_match: exact as f64 / refs.len().max(1) as f64,
    })
}

struct Prepared {
    train: Vec<ParallelCorpus>,
    dev: Vec<ParallelCorpus>,
    test: Vec<(CorpusDecl, ParallelCorpus)>,
}

fn prepare(loaded: &LoadedConfig, run_dir: &Path) -> Result<Prepared> {
    let cfg = &loaded.config;
    let mut read = BTreeMap::new();
    for decl in &cfg.corpora {
        let (c, dropped) = corpus::read_corpus(&loaded.resolve(&decl.path)).map_err(at("prepare"))?;
        if dropped > 0 {
            log::warn!("{}: dropped {dropped} malformed pairs", decl.name);
        }
        let mut c = tagged(c).map_err(at("prepare"))?;
        c.name = decl.name.clone();
        read.insert(decl.name.clone(), c);
    }
    let g2p = match &cfg.multitask.rules {
        Some(path) if cfg.multitask.mode != MultitaskMode::None => {
            let text = fs::read_to_string(loaded.resolve(path)).map_err(at("prepare"))?;
            let (rules, warnings) = G2PRuleSet::compile(&text).map_err(at("prepare"))?;
            for w in warnings {
                log::warn!("g2p rules: {w}");
            }
            Some(rules)
        }
        _ => None,
    };
    let mut train = Vec::new();
    let mut multitask_applied = false;
    for decl in cfg.corpora_with(CorpusRole::Train) {
        let mut c = read[&decl.name].clone();
        for (i, bt) in cfg.corpora.iter().enumerate() {
            if bt.mix_into.as_deref() != Some(decl.name.as_str()) {
                continue;
            }
            let ratio = corpus::parse_ratio(bt.ratio.as_deref().unwrap_or("0")).map_err(at("prepare"))?;
            c = corpus::mix_backtranslation(&c, &read[&bt.name], ratio, derive(cfg.seed, 10 + i as u64))
                .map_err(at("prepare"))?;
        }
        if let Some(rules) = &g2p {
            let matches = c.pairs.first().is_some_and(|p| rules.language() == Some(&p.src_lang));
            if matches {
                c = match cfg.multitask.mode {
                    MultitaskMode::Vertical => corpus::make_g2p_vertical(&c, rules),
                    MultitaskMode::Horizontal => corpus::make_g2p_horizontal(&c, rules, &cfg.multitask.sep),
                    MultitaskMode::None => Ok(c),
                }
                .map_err(at("prepare"))?;
                multitask_applied = true;
            }
        }
        c.name = decl.name.clone();
        corpus::write_corpus(&run_dir.join("prepared").join(&decl.name), &c).map_err(at("prepare"))?;
        train.push(c);
    }
    if g2p.is_some() && !multitask_applied {
        return Err(PipelineError::stage(
            "prepare",
            "the rule file's language matches no training corpus source",
        ));
    }
    let dev = cfg.corpora_with(CorpusRole::Dev).map(|d| read[&d.name].clone()).collect();
    let test = cfg
        .corpora_with(CorpusRole::Test)
        .map(|d| (d.clone(), read[&d.name].clone()))
        .collect();
    Ok(Prepared { train, dev, test })
}

fn stage_mix(
    loaded: &LoadedConfig,
    prepared: &[ParallelCorpus],
    spec: &StageSpec,
    salt: u64,
    run_dir: &Path,
    prefix: &str,
) -> Result<ParallelCorpus> {
    let cfg = &loaded.config;
    let names: Vec<String> = if spec.corpora.is_empty() {
        prepared.iter().map(|c| c.name.clone()).collect()
    } else {
        spec.corpora.clone()
    };
    let mix = MixSpec {
        entries: names
            .into_iter()
            .map(|corpus| MixEntry {
                corpus,
                policy: cfg.balance,
            })
            .collect(),
        shuffle_seed: derive(cfg.seed, salt),
    };
    let mixed = corpus::apply_mix(&mix, prepared).map_err(at("prepare"))?;
    let base = run_dir.join("prepared").join(format!("{prefix}{}", spec.name));
    corpus::write_corpus(&base, &mixed).map_err(at("prepare"))?;
    Ok(mixed)
}

#[allow(clippy::too_many_arguments)]
fn train_stages(
    model: Transformer<f32>,
    mixes: &[ParallelCorpus],
    specs: &[StageSpec],
    seg: &SubwordModel,
    loaded: &LoadedConfig,
    seed: u64,
    ckpt_dir: &Path,
    log_path: &Path,
    label: &str,
) -> Result<(TrainOutcome, Vec<StageSummary>)> {
    let max_tokens = loaded.config.train.max_tokens;
    let stages: Vec<_> = specs
        .iter()
        .zip(mixes)
        .map(|(s, m)| s.to_stage(examples(m, seg, max_tokens)))
        .collect();
    let summaries_base: Vec<(String, usize)> = stages.iter().map(|s| (s.name.clone(), s.data.len())).collect();
    let plan = TrainPlan {
        stages,
        adam: loaded.config.train.adam.clone(),
        seed,
    };
    let outcome = Trainer::with_checkpoints(ckpt_dir)
        .train(model, &plan)
        .map_err(at("train"))?;
    let log: Vec<String> = outcome.log().map(|e| e.to_json_line()).collect();
    write_text(log_path, &lines_text(&log))?;
    let summaries = outcome
        .reports
        .iter()
        .zip(summaries_base)
        .map(|(r, (stage, examples))| StageSummary {
            model: label.to_string(),
            stage,
            steps: r.steps,
            examples,
            final_loss: r.final_loss,
        })
        .collect();
    Ok((outcome, summaries))
}

fn best_texts(lists: &[NBestList], sep: Option<&str>) -> Vec<String> {
    lists
        .iter()
        .map(|l| {
            let text = l.best().and_then(|h| h.text.clone()).unwrap_or_default();
            match sep {
                Some(sep) => strip_phoneme_suffix(&text, sep).to_string(),
                None => text,
            }
        })
        .collect()
}

/// Runs a validated experiment, writing everything under `run_dir`.
///
/// Output directories from an earlier run in the same place are replaced.
pub fn run_experiment(loaded: &LoadedConfig, run_dir: &Path) -> Result<RunManifest> {
    loaded.validate()?;
    let cfg = &loaded.config;
    fs::create_dir_all(run_dir).map_err(|e| PipelineError::io(run_dir, e))?;
    for sub in OUTPUT_DIRS {
        let p = run_dir.join(sub);
        if p.exists() {
            fs::remove_dir_all(&p).map_err(|e| PipelineError::io(&p, e))?;
        }
    }
    let config_json = serde_json::to_string(cfg).expect("config serializes");
    let config_hash = sha256_hex(config_json.as_bytes());
    write_text(&run_dir.join("config.json"), &cfg.to_json())?;

    let mut inputs = BTreeMap::new();
    for decl in &cfg.corpora {
        let base = loaded.resolve(&decl.path);
        for ext in ["src", "tgt", "json", "meta"] {
            let mut f = base.clone().into_os_string();
            f.push(format!(".{ext}"));
            let f = Path::new(&f);
            if f.is_file() {
                inputs.insert(format!("{}.{ext}", decl.name), hash_file(f)?);
            }
        }
    }
    if let Some(rules) = &cfg.multitask.rules {
        inputs.insert("multitask.rules".into(), hash_file(&loaded.resolve(rules))?);
    }

    log::info!("{}: prepare", cfg.name);
    let prepared = prepare(loaded, run_dir)?;
    let mixes = cfg
        .train
        .stages
        .iter()
        .enumerate()
        .map(|(i, s)| stage_mix(loaded, &prepared.train, s, 100 + i as u64, run_dir, "stage-"))
        .collect::<Result<Vec<_>>>()?;

    log::info!("{}: segment", cfg.name);
    let mut tags = BTreeSet::new();
    for c in prepared.train.iter().chain(&prepared.dev).chain(prepared.test.iter().map(|(_, c)| c)) {
        tags.extend(c.pairs.iter().filter_map(|p| leading_tag(&p.source)).map(|t| format!("<{t}>")));
    }
    let horizontal = cfg.multitask.mode == MultitaskMode::Horizontal;
    if horizontal && cfg.multitask.sep != subword::SEP {
        tags.insert(cfg.multitask.sep.clone());
    }
    let tags: Vec<String> = tags.into_iter().collect();
    let seg_lines: Vec<&str> = prepared
        .train
        .iter()
        .flat_map(|c| c.pairs.iter().flat_map(|p| [p.source.as_str(), p.target.as_str()]))
        .collect();
    let seg = SubwordModel::train(seg_lines.iter().copied(), cfg.segmenter, &tags).map_err(at("segment"))?;
    write_text(&run_dir.join("segmenter").join("model.json"), &seg.to_json())?;

    log::info!("{}: train", cfg.name);
    let model_cfg = cfg.model.build(seg.vocab().len(), derive(cfg.seed, 3));
    let model = Transformer::<f32>::new(model_cfg).map_err(at("train"))?;
    let (outcome, mut training) = train_stages(
        model,
        &mixes,
        &cfg.train.stages,
        &seg,
        loaded,
        derive(cfg.seed, 4),
        &run_dir.join("checkpoints"),
        &run_dir.join("train").join("log.jsonl"),
        "translation",
    )?;
    let model = outcome.model;

    log::info!("{}: decode", cfg.name);
    let sep = horizontal.then_some(cfg.multitask.sep.as_str());
    let mut beam = cfg.decode.clone();
    let grid = match &cfg.grid {
        Some(g) => {
            let sources: Vec<String> = prepared.dev.iter().flat_map(|c| c.pairs.iter().map(|p| p.source.clone())).collect();
            let references: Vec<String> =
                prepared.dev.iter().flat_map(|c| c.pairs.iter().map(|p| p.target.clone())).collect();
            let dev = DevSet {
                sources: &sources,
                references: &references,
                strip_sep: sep,
            };
            let r = grid_search(&model, &seg, &seg, &dev, &g.n_grid, &g.b_grid, beam.max_len, g.metric)
                .map_err(at("decode"))?;
            beam.length_norm = r.length_norm;
            beam.beam_size = r.beam_size;
            Some(r)
        }
        None => None,
    };
    if let Some(rs) = &cfg.rescore {
        beam.nbest = beam.nbest.max(rs.nbest);
        beam.beam_size = beam.beam_size.max(beam.nbest);
    }
    let mut decoded = Vec::new();
    for (decl, test) in &prepared.test {
        let mut lists = Vec::with_capacity(test.len());
        for (i, p) in test.pairs.iter().enumerate() {
            let mut list = translate(&model, &seg, &seg, &p.source, &beam).map_err(at("decode"))?;
            list.source_id = i;
            lists.push(list);
        }
        let dir = run_dir.join("decode");
        write_text(&dir.join(format!("{}.nbest", decl.name)), &decode::format_nbest(&lists))?;
        write_text(&dir.join(format!("{}.hyp", decl.name)), &lines_text(&best_texts(&lists, sep)))?;
        decoded.push(lists);
    }

    let mut rescored: Option<Vec<Vec<NBestList>>> = None;
    if let Some(rs) = &cfg.rescore {
        log::info!("{}: rescore", cfg.name);
        let spec = rs.model.as_ref().unwrap_or(&cfg.model);
        let (char_seg, char_model) = match rs.init {
            CharInit::Scratch => {
                let cs = SubwordModel::train(seg_lines.iter().copied(), SegmenterMode::Char, &tags)
                    .map_err(at("rescore"))?;
                let mc = spec.build(cs.vocab().len(), derive(cfg.seed, 5));
                let m = Transformer::<f32>::new(mc).map_err(at("rescore"))?;
                (cs, m)
            }
            CharInit::FromSubword => {
                let (cs, transfer) = subword::char_transfer(&seg);
                let mc = spec.build(cs.vocab().len(), model.config.seed);
                let m = transfer_embeddings(&model, mc, &transfer).map_err(at("rescore"))?;
                (cs, m)
            }
        };
        let dir = run_dir.join("rescore");
        write_text(&dir.join("segmenter.json"), &char_seg.to_json())?;
        let char_mixes = rs
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| stage_mix(loaded, &prepared.train, s, 200 + i as u64, run_dir, "rescore-"))
            .collect::<Result<Vec<_>>>()?;
        let (char_outcome, summaries) = train_stages(
            char_model,
            &char_mixes,
            &rs.stages,
            &char_seg,
            loaded,
            derive(cfg.seed, 6),
            &dir.join("checkpoints"),
            &dir.join("log.jsonl"),
            "character",
        )?;
        training.extend(summaries);
        let rcfg = rs.config();
        let mut all = Vec::new();
        for ((decl, test), lists) in prepared.test.iter().zip(&decoded) {
            let out = lists
                .iter()
                .zip(&test.pairs)
                .map(|(l, p)| rescore(l, &p.source, &char_outcome.model, &char_seg, &rcfg))
                .collect::<Result<Vec<_>, _>>()
                .map_err(at("rescore"))?;
            write_text(&dir.join(format!("{}.nbest", decl.name)), &decode::format_nbest(&out))?;
            write_text(&dir.join(format!("{}.hyp", decl.name)), &lines_text(&best_texts(&out, sep)))?;
            all.push(out);
        }
        rescored = Some(all);
    }

    log::info!("{}: evaluate", cfg.name);
    let mut metrics = BTreeMap::new();
    for (k, ((decl, test), lists)) in prepared.test.iter().zip(&decoded).enumerate() {
        let refs: Vec<String> = test.pairs.iter().map(|p| p.target.clone()).collect();
        let direction = match test.direction() {
            Some((s, t)) => format!("{s}-{t}"),
            None => decl.name.clone(),
        };
        let base = scores(&best_texts(lists, sep), &refs, &cfg.metrics)?;
        let after = match &rescored {
            Some(all) => Some(scores(&best_texts(&all[k], sep), &refs, &cfg.metrics)?),
            None => None,
        };
        let entry = DirectionMetrics {
            corpus: decl.name.clone(),
            segments: refs.len(),
            base,
            rescored: after,
        };
        if metrics.insert(direction.clone(), entry).is_some() {
            return Err(PipelineError::stage(
                "evaluate",
                format!("two test corpora share direction {direction}"),
            ));
        }
    }

    let mut files = Vec::new();
    relative_files(run_dir, run_dir, &mut files)?;
    files.sort();
    let mut artifacts = BTreeMap::new();
    for f in files.into_iter().filter(|f| f != MANIFEST_FILE) {
        artifacts.insert(f.clone(), hash_file(&run_dir.join(&f))?);
    }
    let mut manifest = RunManifest {
        name: cfg.name.clone(),
        config_hash,
        inputs,
        artifacts,
        training,
        decode: DecodeChoice {
            length_norm: beam.length_norm,
            beam_size: beam.beam_size,
            grid,
        },
        metrics,
        content_hash: String::new(),
    };
    manifest.content_hash = manifest.compute_hash();
    write_text(&run_dir.join(MANIFEST_FILE), &manifest.to_json())?;
    Ok(manifest)
}
