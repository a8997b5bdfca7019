use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use needed::corpus::{generate_documents, load_corpus, GenConfig, OemrDocument};
use needed::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Contents of the `--config` file. Relative paths resolve against the
/// directory holding the file.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// JSONL corpus. When absent, the corpus is generated from `generator`.
    pub corpus: Option<PathBuf>,
    pub generator: Option<GenConfig>,
    /// Label names for a corpus file; the generator's names otherwise.
    pub disease_names: Option<Vec<String>>,
    pub train: TrainConfig,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn corpus_path(&self) -> Option<PathBuf> {
        self.corpus.as_ref().map(|p| self.base_dir.join(p))
    }

    /// Empty when neither source names the labels.
    pub fn disease_names(&self) -> Vec<String> {
        match (&self.disease_names, &self.generator) {
            (Some(names), _) => names.clone(),
            (None, Some(gen)) => gen.disease_names(),
            (None, None) => Vec::new(),
        }
    }

    pub fn documents(&self) -> Result<Vec<OemrDocument>> {
        match (self.corpus_path(), &self.generator) {
            (Some(path), _) => {
                load_corpus(&path).with_context(|| format!("loading corpus {}", path.display()))
            }
            (None, Some(gen)) => Ok(generate_documents(gen)?),
            (None, None) => bail!("the config names neither a corpus file nor a generator"),
        }
    }
}
