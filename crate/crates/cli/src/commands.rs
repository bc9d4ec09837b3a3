use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use zsmt::analysis::{write_plot_csv, LabelType, PlotSeries, ProbeReport, SimilarityReport};
use zsmt::data::{DirectionKind, Split};
use zsmt::evaluation::{
    default_max_len, evaluate_all_directions, greedy_decode_batch, pivot_translate_batch, EvalMode, MetricsReport,
};
use zsmt::experiment::{
    Experiment, ExperimentConfig, Stage, CHECKPOINT_DIR, CONFIG_FILE, DATA_DIR, HISTORY_FILE, METRICS_FILE, MODEL_DIR,
    VOCAB_FILE,
};
use zsmt::model::checkpoint::{load_checkpoint, save_checkpoint};
use zsmt::training::TrainHistory;
use zsmt::{DropoutMode, Model};

use crate::{DataArgs, DropoutArg, ModeArg, ModelArgs, RunArgs};

const FAILED_MARKER: &str = "FAILED";

/// Configuration and run directory selected by the common flags.
fn resolve(run: &RunArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match (&run.config, &run.out) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(out)) if out.join(CONFIG_FILE).exists() => ExperimentConfig::load(&out.join(CONFIG_FILE))?,
        _ => ExperimentConfig::default(),
    };
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    let out = run.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    cfg.out_dir = out.clone();
    Ok((cfg, out))
}

/// Run `body`, leaving a `FAILED` file with the error in `out` if it fails.
fn marked(out: &Path, body: impl FnOnce() -> Result<()>) -> Result<()> {
    let marker = out.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    let result = body();
    if let Err(e) = &result {
        if out.is_dir() {
            let _ = fs::write(&marker, format!("{e:#}\n"));
        }
    }
    result
}

fn apply_data_args(cfg: &mut ExperimentConfig, data: &DataArgs) {
    if let Some(n) = data.languages {
        cfg.data.num_languages = n;
    }
    if data.multiway {
        cfg.data.multiway = true;
    }
    if data.disjoint {
        cfg.data.multiway = false;
    }
}

fn apply_model_args(cfg: &mut ExperimentConfig, model: &ModelArgs) {
    if let Some(l) = model.removal_layer {
        cfg.model.residual_removal_layer = (l != 0).then_some(l);
    }
    if model.position_query {
        cfg.model.position_query_enabled = true;
    }
    if let Some(m) = model.dropout_mode {
        cfg.model.dropout_mode = match m {
            DropoutArg::Element => DropoutMode::Elementwise,
            DropoutArg::Variational => DropoutMode::Variational,
        };
    }
    if let Some(e) = model.epochs {
        cfg.train.max_epochs = e;
    }
}

/// Load the data and final model of a trained run.
fn load_run(out: &Path) -> Result<(Experiment, Model)> {
    let config_path = out.join(CONFIG_FILE);
    if !config_path.exists() {
        bail!("no {CONFIG_FILE} in {}", out.display());
    }
    let cfg = ExperimentConfig::load(&config_path)?;
    let exp = Experiment::load_data(&cfg, &out.join(DATA_DIR))
        .with_context(|| format!("loading data of {}", out.display()))?;
    let model_dir = out.join(MODEL_DIR);
    if !model_dir.exists() {
        bail!("no trained model in {}; run `zsmt train` first", model_dir.display());
    }
    let (model, _) = load_checkpoint::<f32>(&model_dir, Some(&exp.vocab.hash()))?;
    Ok((exp, model))
}

pub fn gen_data(run: &RunArgs, data: &DataArgs) -> Result<()> {
    let (mut cfg, out) = resolve(run)?;
    apply_data_args(&mut cfg, data);
    fs::create_dir_all(&out)?;
    marked(&out, || {
        let exp = Experiment::prepare(&cfg)?;
        exp.config.save(&out.join(CONFIG_FILE))?;
        let files = exp.write_data(&out.join(DATA_DIR))?;
        let train = files.iter().filter(|f| f.to_string_lossy().ends_with(".train.tsv")).count();
        println!(
            "wrote {} corpus files ({train} train) and {} tokens of vocabulary to {}",
            files.len(),
            exp.vocab.len(),
            out.join(DATA_DIR).display()
        );
        Ok(())
    })
}

pub fn train(run: &RunArgs, data: &DataArgs, model: &ModelArgs) -> Result<()> {
    let (mut cfg, out) = resolve(run)?;
    apply_data_args(&mut cfg, data);
    apply_model_args(&mut cfg, model);
    cfg.train.checkpoint_dir = Some(out.join(CHECKPOINT_DIR));
    fs::create_dir_all(&out)?;
    marked(&out, || {
        let data_dir = out.join(DATA_DIR);
        let exp = if data_dir.join(VOCAB_FILE).exists() {
            Experiment::load_data(&cfg, &data_dir)?
        } else {
            let exp = Experiment::prepare(&cfg)?;
            exp.write_data(&data_dir)?;
            exp
        };
        exp.config.save(&out.join(CONFIG_FILE))?;
        let (trained, outcome) = exp.train()?;
        save_checkpoint(&trained, &exp.vocab.hash(), &out.join(MODEL_DIR))?;
        outcome.history.save(&out.join(HISTORY_FILE))?;
        println!(
            "trained {} epochs; averaged epochs {:?}; final dev loss {:.4}",
            outcome.history.epochs.len(),
            outcome.history.averaged_epochs,
            outcome.history.final_dev_loss
        );
        Ok(())
    })
}

pub fn translate(run: &RunArgs, src: &str, tgt: &str, pivot: bool, input: Option<&Path>) -> Result<()> {
    let (_, out) = resolve(run)?;
    let (exp, model) = load_run(&out)?;
    let vocab = &exp.vocab;
    vocab.require_language(src)?;
    let t = vocab.require_language(tgt)?;
    let reader: Box<dyn Read> = match input {
        Some(p) => Box::new(fs::File::open(p).with_context(|| format!("opening {}", p.display()))?),
        None => Box::new(std::io::stdin()),
    };
    let lines: Vec<Vec<usize>> = BufReader::new(reader)
        .lines()
        .map(|l| l.map(|l| vocab.encode(&l.split_whitespace().collect::<Vec<_>>())))
        .collect::<std::io::Result<_>>()?;
    let max_pos = model.config().max_positions;
    for chunk in lines.chunks(exp.config.eval.decode_batch.max(1)) {
        let nonempty: Vec<usize> = (0..chunk.len()).filter(|&i| !chunk[i].is_empty()).collect();
        let srcs: Vec<&[usize]> = nonempty.iter().map(|&i| chunk[i].as_slice()).collect();
        let mut hyps = vec![Vec::new(); chunk.len()];
        if !srcs.is_empty() {
            let tgts = vec![t; srcs.len()];
            let decoded = if pivot {
                pivot_translate_batch(&model, vocab, &srcs, exp.pivot(), &tgts)?
            } else {
                let lens: Vec<usize> = srcs.iter().map(|s| default_max_len(s.len(), max_pos)).collect();
                greedy_decode_batch(&model, vocab, &srcs, &tgts, &lens)?
            };
            for (&i, h) in nonempty.iter().zip(decoded) {
                hyps[i] = h;
            }
        }
        for h in hyps {
            println!("{}", vocab.decode(&h).join(" "));
        }
    }
    Ok(())
}

pub fn evaluate(run: &RunArgs, mode: ModeArg) -> Result<()> {
    let (_, out) = resolve(run)?;
    marked(&out, || {
        let (exp, model) = load_run(&out)?;
        let pivot = exp.pivot();
        let test = exp.corpus.filter(|p| {
            p.split == Split::Test
                && match mode {
                    ModeArg::All => true,
                    ModeArg::Supervised => p.kind == DirectionKind::Supervised,
                    ModeArg::ZeroShot | ModeArg::Pivot => p.kind == DirectionKind::ZeroShot,
                }
        });
        if test.is_empty() {
            bail!("no test pairs for the requested mode");
        }
        let mut opts = exp.config.eval.clone();
        opts.pivot = match mode {
            ModeArg::All => opts.pivot,
            ModeArg::Pivot => true,
            _ => false,
        };
        let langs = exp.token_languages();
        let (mut report, _) = evaluate_all_directions(&model, &exp.vocab, &test, pivot, Some(&langs), &opts)?;
        if mode == ModeArg::Pivot {
            report.rows.retain(|r| r.mode == EvalMode::Pivot);
        }
        let file = match mode {
            ModeArg::All => METRICS_FILE.to_string(),
            ModeArg::Supervised => "metrics-supervised.tsv".into(),
            ModeArg::ZeroShot => "metrics-zero-shot.tsv".into(),
            ModeArg::Pivot => "metrics-pivot.tsv".into(),
        };
        report.save(&out.join(&file))?;
        print!("{}", report.to_tsv()?);
        eprint!("{}", report.summary());
        Ok(())
    })
}

pub fn probe(run: &RunArgs, labels: &[String]) -> Result<()> {
    let (_, out) = resolve(run)?;
    let labels = labels
        .iter()
        .map(|l| l.parse::<LabelType>())
        .collect::<zsmt::Result<Vec<_>>>()?;
    marked(&out, || {
        let (exp, model) = load_run(&out)?;
        let report = exp.probe(&model, &labels)?;
        report.save(&out.join("probe.toml"))?;
        fs::write(out.join("probe.txt"), report.to_table())?;
        let series: Vec<PlotSeries> = labels
            .iter()
            .map(|&l| PlotSeries {
                name: l.to_string(),
                points: report.curve(l),
            })
            .collect();
        write_plot_csv(&out.join("probe_plot.csv"), &series)?;
        print!("{}", report.to_table());
        Ok(())
    })
}

pub fn svcca(run: &RunArgs) -> Result<()> {
    let (_, out) = resolve(run)?;
    marked(&out, || {
        let (exp, model) = load_run(&out)?;
        let report = exp.svcca(&model)?;
        report.save(&out.join("svcca.toml"))?;
        fs::write(out.join("svcca.txt"), report.to_table())?;
        let random = (1..=report.num_layers).map(|l| (l, report.random_baseline)).collect();
        write_plot_csv(
            &out.join("svcca_plot.csv"),
            &[
                PlotSeries {
                    name: "mean".into(),
                    points: report.layer_means(),
                },
                PlotSeries {
                    name: "random".into(),
                    points: random,
                },
            ],
        )?;
        print!("{}", report.to_table());
        Ok(())
    })
}

pub fn adapt(run: &RunArgs, to: &Path, language: Option<String>, epochs: Option<usize>) -> Result<()> {
    let (_, out) = resolve(run)?;
    let (mut exp, model) = load_run(&out)?;
    if exp.config.stage != Stage::Base {
        bail!("{} is already an adapted run", out.display());
    }
    if let Some(l) = language {
        exp.config.adapt.language = l;
    }
    if let Some(e) = epochs {
        exp.config.adapt.max_epochs = e;
    }
    exp.config.train.checkpoint_dir = Some(to.join(CHECKPOINT_DIR));
    fs::create_dir_all(to)?;
    marked(to, || {
        let adapted = exp.adapt(&model)?;
        let mut a = adapted.experiment;
        a.config.out_dir = to.to_path_buf();
        a.config.adapt.language = a.vocab.languages()[adapted.language].clone();
        a.config.save(&to.join(CONFIG_FILE))?;
        a.write_data(&to.join(DATA_DIR))?;
        save_checkpoint(&adapted.model, &a.vocab.hash(), &to.join(MODEL_DIR))?;
        adapted.outcome.history.save(&to.join(HISTORY_FILE))?;

        let new = adapted.language;
        let test = a.corpus.filter(|p| p.split == Split::Test && (p.src_lang == new || p.tgt_lang == new));
        let langs = a.token_languages();
        let (report, _) = evaluate_all_directions(&adapted.model, &a.vocab, &test, a.pivot(), Some(&langs), &a.config.eval)?;
        report.save(&to.join("new_language_metrics.tsv"))?;
        println!(
            "added `{}` with {} training pairs",
            a.vocab.languages()[new],
            adapted.new_train.len()
        );
        print!("{}", report.summary());
        Ok(())
    })
}

pub fn report(run: &RunArgs) -> Result<()> {
    let (_, out) = resolve(run)?;
    marked(&out, || {
        let cfg = ExperimentConfig::load(&out.join(CONFIG_FILE))
            .map_err(|e| anyhow!("{} is not a run directory: {e}", out.display()))?;
        let mut s = String::new();
        let m = &cfg.model;
        writeln!(s, "run\t{}", out.display())?;
        writeln!(s, "stage\t{:?}", cfg.stage)?;
        writeln!(s, "seed\t{}", cfg.seed)?;
        writeln!(
            s,
            "languages\t{}\tmultiway\t{}",
            cfg.data.num_languages, cfg.data.multiway
        )?;
        writeln!(
            s,
            "removal_layer\t{}\tposition_query\t{}\tdropout\t{:?}",
            m.residual_removal_layer.unwrap_or(0),
            m.position_query_enabled,
            m.dropout_mode
        )?;
        let history = out.join(HISTORY_FILE);
        if history.exists() {
            let h = TrainHistory::load(&history)?;
            writeln!(
                s,
                "epochs\t{}\taveraged\t{:?}\tfinal_dev_loss\t{:.4}",
                h.epochs.len(),
                h.averaged_epochs,
                h.final_dev_loss
            )?;
        }
        let metrics = out.join(METRICS_FILE);
        if metrics.exists() {
            s.push_str("\n[metrics]\n");
            s.push_str(&MetricsReport::load(&metrics)?.summary());
        }
        let probe = out.join("probe.toml");
        if probe.exists() {
            s.push_str("\n[probe accuracy %]\n");
            s.push_str(&ProbeReport::load(&probe)?.to_table());
        }
        let svcca = out.join("svcca.toml");
        if svcca.exists() {
            s.push_str("\n[svcca]\n");
            s.push_str(&SimilarityReport::load(&svcca)?.to_table());
        }
        fs::write(out.join("report.txt"), &s)?;
        print!("{s}");
        Ok(())
    })
}
