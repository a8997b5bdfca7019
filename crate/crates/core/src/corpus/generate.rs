//! Synthetic OEMR-like corpus with planted, label-consistent signals.
//!
//! Every disease owns a small set of indicative sentence templates. A document
//! is positive for disease `l` in an eye exactly when it contains an
//! indicative sentence for `l` whose laterality covers that eye (before
//! optional label noise). Templated normal findings are injected at fixed
//! document frequencies so that the frequency filter has something to remove.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_corpus, Eye, LabelSet, Laterality, OemrDocument, Section, Sentence};
use crate::error::{Error, Result};

/// Replaced by "left eye", "right eye" or "both eyes" when rendering.
pub const EYE_PLACEHOLDER: &str = "{eye}";
/// Replaced by a small integer when rendering.
const NUMBER_PLACEHOLDER: &str = "{n}";

const MIN_ASYMPTOMATIC_TEMPLATES: usize = 10;
const MIN_INDICATIVE_TEMPLATES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymptomTemplate {
    pub text: String,
    pub section: Section,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiseaseSpec {
    pub name: String,
    pub indicative: Vec<SymptomTemplate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymptomaticTemplate {
    pub text: String,
    pub section: Section,
    /// Target fraction of documents containing this description.
    pub frequency: f64,
}

/// Label-neutral filler sentences with unspecified laterality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeutralTemplate {
    pub text: String,
    pub section: Section,
    pub frequency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_docs: usize,
    pub diseases: Vec<DiseaseSpec>,
    pub asymptomatic: Vec<AsymptomaticTemplate>,
    pub neutral: Vec<NeutralTemplate>,
    /// Probability that a patient has a given disease at all.
    pub prevalence: f64,
    /// Probability that a present disease affects both eyes. Zero yields a
    /// corpus where every finding is confined to one eye.
    pub bilateral_rate: f64,
    pub label_noise: f64,
    pub seed: u64,
}

fn symptom(text: &str, section: Section) -> SymptomTemplate {
    SymptomTemplate {
        text: text.into(),
        section,
    }
}

fn disease(name: &str, indicative: Vec<SymptomTemplate>) -> DiseaseSpec {
    DiseaseSpec {
        name: name.into(),
        indicative,
    }
}

/// Six common eye diseases with two or three indicative templates each.
pub fn default_diseases() -> Vec<DiseaseSpec> {
    use Section::*;
    vec![
        disease(
            "cataract",
            vec![
                symptom("progressive painless blurring {eye}", PresentIllness),
                symptom("lens cortical opacity noted", Examination),
                symptom("nuclear sclerosis of lens", Examination),
            ],
        ),
        disease(
            "glaucoma",
            vec![
                symptom("eye pain with halos around lights {eye}", PresentIllness),
                symptom("intraocular pressure elevated", Examination),
                symptom("optic cup enlarged with rim thinning", Examination),
            ],
        ),
        disease(
            "diabetic_retinopathy",
            vec![
                symptom("floaters and dark spots {eye}", PresentIllness),
                symptom("retinal microaneurysms and dot hemorrhages", Examination),
            ],
        ),
        disease(
            "conjunctivitis",
            vec![
                symptom("redness and sticky discharge {eye}", ChiefComplaint),
                symptom("conjunctival hyperemia with papillae", Examination),
            ],
        ),
        disease(
            "keratitis",
            vec![
                symptom("photophobia and tearing {eye}", ChiefComplaint),
                symptom("corneal infiltrate with epithelial defect", Examination),
            ],
        ),
        disease(
            "macular_degeneration",
            vec![
                symptom("central vision distortion {eye}", PresentIllness),
                symptom("macular drusen and pigment changes", Examination),
            ],
        ),
    ]
}

fn asymptomatic(text: &str, section: Section, frequency: f64) -> AsymptomaticTemplate {
    AsymptomaticTemplate {
        text: text.into(),
        section,
        frequency,
    }
}

fn default_asymptomatic() -> Vec<AsymptomaticTemplate> {
    use Section::*;
    vec![
        asymptomatic("cornea clear and transparent", Examination, 0.95),
        asymptomatic("anterior chamber of normal depth", Examination, 0.9),
        asymptomatic("iris texture clear", Examination, 0.85),
        asymptomatic("pupil round and reactive to light", Examination, 0.8),
        asymptomatic("conjunctiva without congestion", Examination, 0.6),
        asymptomatic("vitreous body clear", Examination, 0.5),
        asymptomatic("no history of ocular trauma {eye}", PresentIllness, 0.35),
        asymptomatic("optic disc margin clear", Examination, 0.25),
        asymptomatic("retina flat and attached", Examination, 0.15),
        asymptomatic("no previous eye surgery {eye}", PresentIllness, 0.08),
        asymptomatic("eyelid without edema", Examination, 0.05),
        asymptomatic("no itching {eye}", ChiefComplaint, 0.03),
    ]
}

fn default_neutral() -> Vec<NeutralTemplate> {
    use Section::*;
    vec![
        NeutralTemplate {
            text: "decreased vision for {n} days".into(),
            section: ChiefComplaint,
            frequency: 0.5,
        },
        NeutralTemplate {
            text: "came for routine review".into(),
            section: PresentIllness,
            frequency: 0.3,
        },
        NeutralTemplate {
            text: "history of hypertension for {n} years".into(),
            section: PresentIllness,
            frequency: 0.2,
        },
    ]
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_docs: 1000,
            diseases: default_diseases(),
            asymptomatic: default_asymptomatic(),
            neutral: default_neutral(),
            prevalence: 0.3,
            bilateral_rate: 0.4,
            label_noise: 0.0,
            seed: 1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.diseases.is_empty() {
            return Err(Error::config("at least one disease is required"));
        }
        for d in &self.diseases {
            if d.indicative.len() < MIN_INDICATIVE_TEMPLATES {
                return Err(Error::config(format!(
                    "disease {} has {} indicative templates, at least {MIN_INDICATIVE_TEMPLATES} required",
                    d.name,
                    d.indicative.len()
                )));
            }
        }
        if self.asymptomatic.len() < MIN_ASYMPTOMATIC_TEMPLATES {
            return Err(Error::config(format!(
                "{} asymptomatic templates given, at least {MIN_ASYMPTOMATIC_TEMPLATES} required",
                self.asymptomatic.len()
            )));
        }
        let freqs = self
            .asymptomatic
            .iter()
            .map(|t| t.frequency)
            .chain(self.neutral.iter().map(|t| t.frequency));
        for f in freqs {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::config(format!(
                    "template frequency {f} outside (0, 1]"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::config(format!(
                "label noise {} outside [0, 1)",
                self.label_noise
            )));
        }
        for (name, p) in [
            ("prevalence", self.prevalence),
            ("bilateral_rate", self.bilateral_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn disease_names(&self) -> Vec<String> {
        self.diseases.iter().map(|d| d.name.clone()).collect()
    }

    /// Diseases for which `sentence` is a rendering of an indicative template.
    pub fn indicative_diseases(&self, sentence: &Sentence) -> Vec<usize> {
        if sentence.is_asymptomatic_template {
            return Vec::new();
        }
        let text = sentence.text();
        (0..self.diseases.len())
            .filter(|&l| {
                self.diseases[l]
                    .indicative
                    .iter()
                    .any(|t| render_template(&t.text, sentence.laterality) == text)
            })
            .collect()
    }
}

/// Renders a template for the given laterality. Only templates with the eye
/// placeholder mention the eye in their text.
pub fn render_template(text: &str, laterality: Laterality) -> String {
    let marker = match laterality {
        Laterality::Left => "left eye",
        Laterality::Right => "right eye",
        Laterality::Both => "both eyes",
        Laterality::Unspecified => "",
    };
    text.replace(EYE_PLACEHOLDER, marker)
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn random_side<R: Rng>(rng: &mut R) -> Laterality {
    if rng.gen_bool(0.5) {
        Laterality::Left
    } else {
        Laterality::Right
    }
}

fn one_document(cfg: &GenConfig, index: usize, rng: &mut ChaCha8Rng) -> OemrDocument {
    let mut sentences: Vec<Sentence> = Vec::new();

    for d in &cfg.diseases {
        if !rng.gen_bool(cfg.prevalence) {
            continue;
        }
        let pick = |rng: &mut ChaCha8Rng| d.indicative.choose(rng).expect("validated non-empty");
        if rng.gen_bool(cfg.bilateral_rate) {
            if rng.gen_bool(0.5) {
                let t = pick(rng);
                sentences.push(Sentence::new(
                    &render_template(&t.text, Laterality::Both),
                    t.section,
                    Laterality::Both,
                    false,
                ));
            } else {
                for side in [Laterality::Left, Laterality::Right] {
                    let t = pick(rng);
                    sentences.push(Sentence::new(
                        &render_template(&t.text, side),
                        t.section,
                        side,
                        false,
                    ));
                }
            }
        } else {
            let side = random_side(rng);
            let extra = usize::from(rng.gen_bool(0.3));
            for _ in 0..=extra {
                let t = pick(rng);
                sentences.push(Sentence::new(
                    &render_template(&t.text, side),
                    t.section,
                    side,
                    false,
                ));
            }
        }
    }

    for t in &cfg.asymptomatic {
        if rng.gen_bool(t.frequency) {
            let lat = match rng.gen_range(0..3) {
                0 => Laterality::Left,
                1 => Laterality::Right,
                _ => Laterality::Both,
            };
            sentences.push(Sentence::new(
                &render_template(&t.text, lat),
                t.section,
                lat,
                true,
            ));
        }
    }

    for t in &cfg.neutral {
        if rng.gen_bool(t.frequency) {
            let text = t
                .text
                .replace(NUMBER_PLACEHOLDER, &rng.gen_range(1..=30).to_string());
            sentences.push(Sentence::new(
                &text,
                t.section,
                Laterality::Unspecified,
                false,
            ));
        }
    }

    if sentences.is_empty() {
        sentences.push(Sentence::new(
            "routine visit",
            Section::ChiefComplaint,
            Laterality::Unspecified,
            false,
        ));
    }

    sentences.shuffle(rng);
    sentences.sort_by_key(|s| s.section);

    let labels = |eye: Eye| {
        LabelSet(
            cfg.diseases
                .iter()
                .map(|d| {
                    sentences.iter().any(|s| {
                        !s.is_asymptomatic_template
                            && s.laterality != Laterality::Unspecified
                            && s.laterality.applies_to(eye)
                            && d.indicative
                                .iter()
                                .any(|t| render_template(&t.text, s.laterality) == s.text())
                    })
                })
                .collect(),
        )
    };
    let mut labels_left = labels(Eye::Left);
    let mut labels_right = labels(Eye::Right);
    if cfg.label_noise > 0.0 {
        for v in labels_left.0.iter_mut().chain(labels_right.0.iter_mut()) {
            if rng.gen_bool(cfg.label_noise) {
                *v = !*v;
            }
        }
    }

    OemrDocument {
        id: format!("doc-{index:05}"),
        sentences,
        labels_left,
        labels_right,
    }
}

/// Generates `cfg.n_docs` documents; identical configs give identical corpora.
pub fn generate_documents(cfg: &GenConfig) -> Result<Vec<OemrDocument>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.n_docs)
        .map(|i| one_document(cfg, i, &mut rng))
        .collect())
}

pub fn generate_corpus(cfg: &GenConfig, path: &Path) -> Result<()> {
    let docs = generate_documents(cfg)?;
    write_corpus(&docs, path)
}
