use crate::settings::echo;
use crate::CliError;
use asrlab::config::RunConfig;
use asrlab::data::{generate_corpus, load_utterances, write_corpus, Manifest};
use asrlab::decoding::{read_hypotheses, write_hypotheses, DecodeRecord, Method, Recognizer};
use asrlab::eval::{cer, domain_report, longtail_bins, longtail_split, Scored};
use asrlab::lexicon::{read_lexicon, CoverageStats, SememeLexicon, SememeSource, TokenVocab};
use asrlab::model::{load_checkpoint, save_checkpoint};
use asrlab::training::{average_checkpoints, train as run_training};
use serde::Serialize;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

#[derive(Serialize)]
struct SplitSummary {
    utterances: usize,
    tokens: usize,
    frames: usize,
}

#[derive(Serialize)]
struct GenerationReport {
    vocab_size: usize,
    sememe_count: usize,
    lexicon_coverage: CoverageStats,
    splits: BTreeMap<String, SplitSummary>,
    manifests: BTreeMap<String, PathBuf>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus = generate_corpus(&cfg.corpus)?;
    let dir = cfg.data_dir();
    let manifests = write_corpus(&corpus, &dir)?;
    let report = GenerationReport {
        vocab_size: corpus.vocab.len(),
        sememe_count: corpus.sememes.len(),
        lexicon_coverage: corpus.lexicon.coverage_stats(&corpus.vocab),
        splits: corpus
            .splits
            .iter()
            .map(|s| {
                let summary = SplitSummary {
                    utterances: s.utterances.len(),
                    tokens: s.utterances.iter().map(|u| u.tokens.len()).sum(),
                    frames: s.utterances.iter().map(|u| u.frames()).sum(),
                };
                (s.name.clone(), summary)
            })
            .collect(),
        manifests: manifests
            .into_iter()
            .map(|(name, p)| (name, p.strip_prefix(&dir).map(Path::to_path_buf).unwrap_or(p)))
            .collect(),
    };
    write_json(&dir.join("generation.json"), &report)?;
    echo(cfg, &dir)?;
    println!("wrote corpus to {}", dir.display());
    Ok(())
}

fn read_vocab(cfg: &RunConfig) -> Result<TokenVocab, CliError> {
    let path = cfg.data_dir().join("units.txt");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))?;
    Ok(TokenVocab::from_units(&text)?)
}

/// Vocabulary and lexicon, checked against the model section.
fn resources(cfg: &RunConfig) -> Result<(TokenVocab, SememeLexicon), CliError> {
    let vocab = read_vocab(cfg)?;
    let path = cfg.lexicon.clone().unwrap_or_else(|| cfg.data_dir().join("lexicon.txt"));
    let (lexicon, _) = read_lexicon(&path, &vocab, SememeSource::Build).map_err(|e| match e {
        asrlab::Error::Io(io) => CliError::io(format!("cannot read lexicon {}: {io}", path.display())),
        other => other.into(),
    })?;
    if vocab.len() != cfg.model.vocab_size {
        return Err(CliError::config(format!(
            "units.txt has {} symbols but model.vocab_size = {}",
            vocab.len(),
            cfg.model.vocab_size
        )));
    }
    if cfg.model.uses_sememes() && lexicon.sememe_count() != cfg.model.sememe_count {
        return Err(CliError::config(format!(
            "lexicon has {} sememes but model.sememe_count = {}",
            lexicon.sememe_count(),
            cfg.model.sememe_count
        )));
    }
    Ok((vocab, lexicon))
}

fn model_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("models").join(cfg.model.mode.as_str())
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let (vocab, lexicon) = resources(cfg)?;
    let data = cfg.data_dir();
    let load = |split: &str| -> Result<_, CliError> {
        Ok(load_utterances(&Manifest::read(&data.join(format!("{split}.jsonl")))?, &vocab)?)
    };
    let (train_set, dev_set) = (load("train")?, load("dev")?);
    let dir = model_dir(cfg);
    echo(cfg, &dir)?;
    let out = run_training(&cfg.model, &cfg.train, &cfg.decode, lexicon.clone(), &train_set, &dev_set, &dir)?;
    let avg = average_checkpoints(&out.records, cfg.train.average_k, &cfg.model, &lexicon)?;
    let path = dir.join("model.ckpt");
    save_checkpoint(&avg, &path)?;
    write_json(&dir.join("checkpoints.json"), &out.records)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub struct DecodeRequest {
    pub method: String,
    pub model: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

pub fn decode(cfg: &RunConfig, req: &DecodeRequest) -> Result<(), CliError> {
    let method: Method = req.method.parse()?;
    let (vocab, lexicon) = resources(cfg)?;
    let model_path = req.model.clone().unwrap_or_else(|| model_dir(cfg).join("model.ckpt"));
    let model = load_checkpoint(&model_path, Some(&cfg.model), lexicon)?;
    let manifest_path = req.manifest.clone().unwrap_or_else(|| cfg.data_dir().join("test.jsonl"));
    let utts = load_utterances(&Manifest::read(&manifest_path)?, &vocab)?;
    let output = req.output.clone().unwrap_or_else(|| {
        let stem = manifest_path.file_stem().map_or("hyps".into(), |s| s.to_string_lossy().into_owned());
        cfg.out_dir
            .join("hyps")
            .join(cfg.model.mode.as_str())
            .join(format!("{stem}.{method}.jsonl"))
    });
    let rec = Recognizer::new(&model, cfg.decode);
    let mut records = Vec::with_capacity(utts.len());
    for u in &utts {
        let hyp = rec.recognize(&u.features, method)?;
        records.push(DecodeRecord {
            id: u.id.clone(),
            method,
            text: vocab.decode(&hyp.tokens),
            att_score: hyp.att_score,
            ctc_score: hyp.ctc_score,
            combined: hyp.combined,
        });
    }
    let parent = output.parent().unwrap_or(Path::new(".")).to_path_buf();
    echo(cfg, &parent)?;
    write_hypotheses(&output, &records)?;
    println!("wrote {} hypotheses to {}", records.len(), output.display());
    Ok(())
}

pub struct EvalRequest {
    pub refs: PathBuf,
    pub hyps: PathBuf,
    pub train_manifest: Option<PathBuf>,
    pub longtail: bool,
    pub report_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct DomainLine {
    domain: String,
    utterances: usize,
    ref_tokens: usize,
    errors: usize,
    cer: Option<f64>,
}

#[derive(Serialize)]
struct EvalSummary {
    refs: PathBuf,
    hyps: PathBuf,
    methods: Vec<String>,
    utterances: usize,
    overall_cer: f64,
    domains: Vec<DomainLine>,
}

fn id_offenders(refs: &Manifest, hyps: &[DecodeRecord]) -> Vec<String> {
    let ref_ids: HashSet<&str> = refs.records.iter().map(|r| r.id.as_str()).collect();
    let mut seen = HashSet::new();
    let mut out: Vec<String> = Vec::new();
    for h in hyps {
        if !ref_ids.contains(h.id.as_str()) || !seen.insert(h.id.as_str()) {
            out.push(h.id.clone());
        }
    }
    let missing = refs.records.iter().filter(|r| !seen.contains(r.id.as_str())).map(|r| r.id.clone());
    missing.chain(out).collect()
}

pub fn eval(cfg: &RunConfig, req: &EvalRequest) -> Result<(), CliError> {
    if req.longtail && req.train_manifest.is_none() {
        return Err(CliError::config("the long-tail report needs --train-manifest"));
    }
    let refs = Manifest::read(&req.refs)?;
    let hyps = read_hypotheses(&req.hyps)?;
    let offenders = id_offenders(&refs, &hyps);
    if !offenders.is_empty() {
        let shown: Vec<&str> = offenders.iter().take(5).map(String::as_str).collect();
        return Err(CliError::config(format!(
            "reference and hypothesis ids differ ({} offenders): {}",
            offenders.len(),
            shown.join(", ")
        )));
    }
    let vocab = read_vocab(cfg)?;
    let by_id: HashMap<&str, &DecodeRecord> = hyps.iter().map(|h| (h.id.as_str(), h)).collect();
    let ref_tokens: Vec<Vec<usize>> = refs.records.iter().map(|r| vocab.encode(&r.text)).collect();
    let hyp_tokens: Vec<Vec<usize>> = refs
        .records
        .iter()
        .map(|r| vocab.encode(&by_id[r.id.as_str()].text))
        .collect();
    let overall = cer(&ref_tokens, &hyp_tokens)?;

    let mut domains = cfg.eval.domains.clone();
    if domains.is_empty() {
        for r in &refs.records {
            if !domains.contains(&r.domain) {
                domains.push(r.domain.clone());
            }
        }
    }
    let items: Vec<Scored<'_>> = refs
        .records
        .iter()
        .zip(ref_tokens.iter().zip(&hyp_tokens))
        .map(|(r, (rt, ht))| Scored {
            domain: &r.domain,
            reference: rt,
            hypothesis: ht,
        })
        .collect();
    let table = domain_report(&domains, &items)?;

    let dir = req.report_dir.clone().unwrap_or_else(|| {
        let stem = req.hyps.file_stem().map_or("eval".into(), |s| s.to_string_lossy().into_owned());
        cfg.out_dir.join("reports").join(stem)
    });
    echo(cfg, &dir)?;
    let mut methods: Vec<String> = hyps.iter().map(|h| h.method.to_string()).collect();
    methods.sort();
    methods.dedup();
    let summary = EvalSummary {
        refs: req.refs.clone(),
        hyps: req.hyps.clone(),
        methods,
        utterances: refs.len(),
        overall_cer: overall,
        domains: table
            .rows
            .iter()
            .map(|(d, r)| DomainLine {
                domain: d.clone(),
                utterances: r.utterances,
                ref_tokens: r.ref_tokens,
                errors: r.errors,
                cer: r.cer(),
            })
            .collect(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    std::fs::write(dir.join("domains.csv"), table.to_csv())?;
    println!("overall CER {overall:.6} over {} utterances", refs.len());

    if let Some(train_path) = &req.train_manifest.as_ref().filter(|_| req.longtail) {
        let train = Manifest::read(train_path)?;
        let train_tokens: Vec<Vec<usize>> = train.records.iter().map(|r| vocab.encode(&r.text)).collect();
        let split = longtail_split(&train_tokens, &vocab, cfg.eval.tail_threshold)?;
        let bins = longtail_bins(&ref_tokens, &hyp_tokens, &split)?;
        std::fs::write(dir.join("longtail.csv"), bins.to_csv())?;
        write_json(
            &dir.join("longtail.json"),
            &serde_json::json!({ "split": split, "bins": bins }),
        )?;
        println!("long-tail report in {}", dir.display());
    }
    Ok(())
}
