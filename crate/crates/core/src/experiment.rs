//! One configuration file drives a full run: data generation, training,
//! evaluation, analysis and new-language adaptation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{
    multiway_sentences, per_layer_svcca, probe_positional_information, LabelType, ProbeConfig, ProbeReport,
    SimilarityReport,
};
use crate::data::{
    build_english_centered_splits, load_tsv_dir, write_tsv_corpus, DirectionKind, EnglishCenteredSplits,
    ParallelCorpus, ReorderRule, Split, SyntheticTask, SyntheticTaskSpec, VocabMode, Vocabulary,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_all_directions, EvalOptions, MetricsReport, TokenLanguages};
use crate::model::{ModelConfig, TransformerModel};
use crate::rng::SeedStream;
use crate::training::{adapt_to_new_language, expand_vocabulary, train, TrainConfig, TrainOutcome};
use crate::Model;

pub const CONFIG_FILE: &str = "config.toml";
pub const DATA_DIR: &str = "data";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const MODEL_DIR: &str = "model";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const HISTORY_FILE: &str = "history.toml";
pub const METRICS_FILE: &str = "metrics.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Dev sentences per language used for probes.
    pub probe_sentences: usize,
    pub probe: ProbeConfig,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            probe_sentences: 100,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// Code of the added language; empty means the next `l{n}` code.
    pub language: String,
    /// Word-order rule of the added language; unset means the next rule of
    /// [`ReorderRule::DEFAULT_CYCLE`].
    pub rule: Option<ReorderRule>,
    /// New-language training sentences as a fraction of
    /// `sentences_per_direction`.
    pub data_fraction: f64,
    /// Standard deviation of the noise added to averaged embeddings.
    pub embedding_noise: f64,
    pub max_epochs: usize,
}

impl AdaptConfig {
    /// Code and word-order rule of the language added to a task with `n`
    /// languages.
    pub fn new_language(&self, n: usize) -> (String, ReorderRule) {
        let code = if self.language.is_empty() {
            format!("l{n}")
        } else {
            self.language.clone()
        };
        let cycle = ReorderRule::DEFAULT_CYCLE;
        (code, self.rule.unwrap_or(cycle[n.saturating_sub(1) % cycle.len()]))
    }
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            language: String::new(),
            rule: None,
            data_fraction: 0.1,
            embedding_noise: 0.01,
            max_epochs: 5,
        }
    }
}

/// Whether a run directory holds a base model or one adapted to a new
/// language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    #[default]
    Base,
    Adapted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root of all randomness; copied into the data and training sections
    /// on resolution.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub stage: Stage,
    pub data: SyntheticTaskSpec,
    /// Keys given here override [`experiment_model`], not the plain
    /// [`ModelConfig`] defaults.
    #[serde(deserialize_with = "overlay_model")]
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub analysis: AnalysisConfig,
    pub adapt: AdaptConfig,
}

/// Model shape of a desk-scale run: 3 encoder and 2 decoder layers.
pub fn experiment_model() -> ModelConfig {
    ModelConfig {
        num_encoder_layers: 3,
        num_decoder_layers: 2,
        max_positions: 32,
        ..ModelConfig::default()
    }
}

fn overlay_model<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<ModelConfig, D::Error> {
    use serde::de::Error as _;
    let patch = toml::Table::deserialize(d)?;
    let mut base = toml::Table::try_from(experiment_model()).map_err(D::Error::custom)?;
    base.extend(patch);
    base.try_into().map_err(D::Error::custom)
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
            stage: Stage::Base,
            data: SyntheticTaskSpec::default(),
            model: experiment_model(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            analysis: AnalysisConfig::default(),
            adapt: AdaptConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Copy with the top-level seed propagated and every section validated.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        c.data.seed = c.seed;
        c.train.seed = c.seed;
        c.data.validate()?;
        c.train.validate()?;
        if !(c.adapt.data_fraction > 0.0 && c.adapt.data_fraction <= 1.0) {
            return Err(Error::Config("adapt.data_fraction must be in (0, 1]".into()));
        }
        if c.analysis.probe_sentences < 2 {
            return Err(Error::Config("analysis.probe_sentences must be at least 2".into()));
        }
        Ok(c)
    }

    /// Model configuration sized for `vocab`.
    pub fn model_config(&self, vocab: &Vocabulary) -> Result<ModelConfig> {
        let c = ModelConfig {
            vocab_size: vocab.len(),
            num_languages: vocab.num_languages(),
            ..self.model.clone()
        };
        c.validate()?;
        Ok(c)
    }
}

/// Generated data of one run and its task description.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub task: SyntheticTask,
    pub vocab: Vocabulary,
    pub corpus: ParallelCorpus,
    pub splits: EnglishCenteredSplits,
}

/// Outcome of adding a language to a trained model.
pub struct Adaptation {
    pub experiment: Experiment,
    pub model: Model,
    pub outcome: TrainOutcome<f32>,
    /// Vocabulary language id of the added language.
    pub language: usize,
    /// Training pairs between the new language and the pivot.
    pub new_train: ParallelCorpus,
}

impl Experiment {
    /// Generate the task and corpus for `config` (resolved first).
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        let config = config.resolved()?;
        if config.stage != Stage::Base {
            return Err(Error::Config("only base runs generate data from scratch".into()));
        }
        let (task, vocab) = SyntheticTask::build(&config.data)?;
        let corpus = task.generate()?;
        Self::from_parts(config, task, vocab, corpus)
    }

    /// Task and vocabulary described by `config`, including the added
    /// language of an adapted run.
    pub fn build_task(config: &ExperimentConfig) -> Result<(SyntheticTask, Vocabulary)> {
        let (task, mut vocab) = SyntheticTask::build(&config.data)?;
        match config.stage {
            Stage::Base => Ok((task, vocab)),
            Stage::Adapted => {
                let (code, rule) = config.adapt.new_language(task.num_languages());
                let task = task.add_language(&mut vocab, &code, rule)?;
                Ok((task, vocab))
            }
        }
    }

    /// Write the vocabulary and the supervised train, dev and test corpora
    /// as TSV files into `dir`.
    pub fn write_data(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        let mut keep = self.splits.train.clone();
        keep.extend(self.corpus.filter(|p| p.split != Split::Train));
        write_tsv_corpus(&keep, &self.vocab, dir)
    }

    /// Read data written by [`Experiment::write_data`]; the stored
    /// vocabulary must match the one `config` describes.
    pub fn load_data(config: &ExperimentConfig, dir: &Path) -> Result<Self> {
        let config = config.resolved()?;
        let (task, vocab) = Self::build_task(&config)?;
        let mut stored = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        if stored.hash() != vocab.hash() {
            return Err(Error::Data(format!(
                "vocabulary in {} does not match the configured task",
                dir.display()
            )));
        }
        let mut corpus = load_tsv_dir(dir, &mut stored, VocabMode::Frozen)?;
        corpus.retag(task.vocab_language(task.pivot()));
        Self::from_parts(config, task, vocab, corpus)
    }

    pub fn from_parts(
        config: ExperimentConfig,
        task: SyntheticTask,
        vocab: Vocabulary,
        corpus: ParallelCorpus,
    ) -> Result<Self> {
        let splits = build_english_centered_splits(&corpus, task.vocab_language(task.pivot()), false)?;
        Ok(Self {
            config,
            task,
            vocab,
            corpus,
            splits,
        })
    }

    pub fn pivot(&self) -> usize {
        self.task.vocab_language(self.task.pivot())
    }

    pub fn token_languages(&self) -> TokenLanguages {
        TokenLanguages::from_task(&self.task)
    }

    /// Freshly initialized model for this run.
    pub fn init_model(&self) -> Result<Model> {
        TransformerModel::new(self.config.model_config(&self.vocab)?, SeedStream::new(self.config.seed))
    }

    /// Initialize and train a model on the supervised directions.
    pub fn train(&self) -> Result<(Model, TrainOutcome<f32>)> {
        let mut model = self.init_model()?;
        let outcome = train(&mut model, &self.vocab, &self.splits.train, &self.splits.dev, &self.config.train, None)?;
        Ok((model, outcome))
    }

    /// BLEU and off-target rates on every test direction.
    pub fn evaluate(&self, model: &Model) -> Result<MetricsReport> {
        let test = self.corpus.split(Split::Test);
        let langs = self.token_languages();
        Ok(evaluate_all_directions(model, &self.vocab, &test, self.pivot(), Some(&langs), &self.config.eval)?.0)
    }

    /// Dev sentences of every language with their language id, at most
    /// `analysis.probe_sentences` per language.
    pub fn probe_sentences(&self) -> Result<Vec<(Vec<usize>, usize)>> {
        let dev = self.corpus.split(Split::Dev);
        let (langs, sentences) = multiway_sentences(&dev)?;
        let n = self.config.analysis.probe_sentences;
        Ok(langs
            .iter()
            .zip(sentences)
            .flat_map(|(&l, s)| s.into_iter().take(n).map(move |s| (s, l)))
            .collect())
    }

    /// Token-ID, position-ID and language-ID probes at every layer.
    pub fn probe(&self, model: &Model, labels: &[LabelType]) -> Result<ProbeReport> {
        let sentences = self.probe_sentences()?;
        let layers: Vec<usize> = (0..=model.config().num_encoder_layers).collect();
        let mut report = ProbeReport::default();
        for &label in labels {
            report.merge(probe_positional_information(
                model,
                &sentences,
                label,
                &layers,
                self.config.seed,
                &self.config.analysis.probe,
            )?);
        }
        Ok(report)
    }

    /// Per-layer SVCCA between languages on the multiway dev set.
    pub fn svcca(&self, model: &Model) -> Result<SimilarityReport> {
        per_layer_svcca(model, &self.vocab, &self.corpus.split(Split::Dev), self.config.seed)
    }

    /// Add one language with `adapt.data_fraction` of the per-direction
    /// data paired with the pivot, expand the vocabulary and fine-tune on
    /// the original plus new supervised data.
    pub fn adapt(&self, model: &Model) -> Result<Adaptation> {
        let cfg = &self.config.adapt;
        if self.config.stage != Stage::Base {
            return Err(Error::Config("run is already adapted".into()));
        }
        let n = self.task.num_languages();
        let (code, rule) = cfg.new_language(n);
        let mut vocab = self.vocab.clone();
        let task = self.task.add_language(&mut vocab, &code, rule)?;
        let count = ((self.config.data.sentences_per_direction as f64 * cfg.data_fraction).round() as usize).max(1);
        let added = task.generate_for_language(n, count)?;
        let language = task.vocab_language(n);

        let mut expanded = expand_vocabulary(model, &self.vocab, &vocab, cfg.embedding_noise, self.config.seed)?;
        let pivot = self.pivot();
        let new_train = added.filter(|p| p.split == Split::Train);
        let mut dev = self.splits.dev.clone();
        dev.extend(added.filter(|p| p.split == Split::Dev && (p.src_lang == pivot || p.tgt_lang == pivot)));
        dev.retag(pivot);
        let train_cfg = TrainConfig {
            max_epochs: cfg.max_epochs,
            ..self.config.train.clone()
        };
        let outcome = adapt_to_new_language(
            &mut expanded,
            &vocab,
            &self.splits.train,
            &new_train,
            &dev,
            pivot,
            &train_cfg,
            None,
        )?;

        let mut config = self.config.clone();
        config.stage = Stage::Adapted;
        let mut corpus = self.corpus.clone();
        corpus.extend(added);
        corpus.retag(pivot);
        let experiment = Experiment::from_parts(config, task, vocab, corpus)?;
        Ok(Adaptation {
            experiment,
            model: expanded,
            outcome,
            language,
            new_train,
        })
    }

    /// Test pairs whose source is `lang` and whose target is not the pivot.
    pub fn zero_shot_from(&self, lang: usize) -> ParallelCorpus {
        self.corpus
            .filter(|p| p.split == Split::Test && p.src_lang == lang && p.kind == DirectionKind::ZeroShot)
    }
}
