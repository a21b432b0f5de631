//! Text prompts: fixed templates, per-class caption assets, and learnable
//! CoOp context run through a frozen toy text encoder.

mod coop;
mod encoder;
mod tokenizer;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use coop::{coop_assemble, CoopContext};
pub use encoder::{EncoderConfig, EncoderInput, EncoderTape, ToyTextEncoder};
pub use tokenizer::{toy_tokenize, EOS_ID, MAX_SEQ_LEN, VOCAB_SIZE};

/// The default BACH class names in label order.
pub const BACH_CLASSES: [&str; 4] = ["Normal", "Benign", "In Situ Carcinoma", "Invasive Carcinoma"];

pub const VANILLA_TEMPLATE: &str = "a photo of a {cls}.";
pub const HAND_CRAFTED_TEMPLATE: &str = "a photo of a {cls} breast tissue.";

const BACH_ASSET: &str = include_str!("../../assets/bach_prompts.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptScheme {
    Classname,
    Vanilla,
    HandCrafted,
    Gpt,
    Coop,
}

impl fmt::Display for PromptScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptScheme::Classname => "classname",
            PromptScheme::Vanilla => "vanilla",
            PromptScheme::HandCrafted => "hand_crafted",
            PromptScheme::Gpt => "gpt",
            PromptScheme::Coop => "coop",
        })
    }
}

impl FromStr for PromptScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classname" => Ok(PromptScheme::Classname),
            "vanilla" => Ok(PromptScheme::Vanilla),
            "hand_crafted" | "hand-crafted" => Ok(PromptScheme::HandCrafted),
            "gpt" => Ok(PromptScheme::Gpt),
            "coop" => Ok(PromptScheme::Coop),
            other => Err(Error::Config(format!("unknown prompt scheme `{other}`"))),
        }
    }
}

/// Pre-generated prompt strings: class name -> asset key -> strings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptAsset(pub BTreeMap<String, BTreeMap<String, Vec<String>>>);

impl PromptAsset {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// The captions shipped for the four BACH classes (`gpt0`, `gpt1`).
    pub fn bach_default() -> Self {
        Self::from_json(BACH_ASSET).expect("bundled asset is valid JSON")
    }

    pub fn strings(&self, classname: &str, key: &str) -> Option<&[String]> {
        self.0.get(classname)?.get(key).map(Vec::as_slice)
    }
}

/// A prompt scheme together with whatever it needs to produce text.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptSpec {
    Classname,
    /// Template containing `{cls}`.
    Template {
        scheme: PromptScheme,
        template: String,
    },
    /// Per-class strings looked up in an asset under `key`.
    Gpt { asset: PromptAsset, key: String },
    Coop { context_len: usize, embed_dim: usize },
}

impl PromptSpec {
    pub fn vanilla() -> Self {
        PromptSpec::Template {
            scheme: PromptScheme::Vanilla,
            template: VANILLA_TEMPLATE.into(),
        }
    }

    pub fn hand_crafted() -> Self {
        PromptSpec::Template {
            scheme: PromptScheme::HandCrafted,
            template: HAND_CRAFTED_TEMPLATE.into(),
        }
    }

    pub fn gpt(asset: PromptAsset, key: impl Into<String>) -> Self {
        PromptSpec::Gpt {
            asset,
            key: key.into(),
        }
    }

    pub fn coop(context_len: usize, embed_dim: usize) -> Result<Self> {
        if context_len < 1 {
            return Err(Error::Config("CoOp needs at least one context vector".into()));
        }
        Ok(PromptSpec::Coop {
            context_len,
            embed_dim,
        })
    }

    pub fn scheme(&self) -> PromptScheme {
        match self {
            PromptSpec::Classname => PromptScheme::Classname,
            PromptSpec::Template { scheme, .. } => *scheme,
            PromptSpec::Gpt { .. } => PromptScheme::Gpt,
            PromptSpec::Coop { .. } => PromptScheme::Coop,
        }
    }

    /// Short label for result tables, e.g. `vanilla`, `gpt1`, `coop4`.
    pub fn label(&self) -> String {
        match self {
            PromptSpec::Gpt { key, .. } => key.clone(),
            PromptSpec::Coop { context_len, .. } => format!("coop{context_len}"),
            other => other.scheme().to_string(),
        }
    }

    /// Prompt strings for one class. Template schemes give exactly one.
    pub fn render(&self, classname: &str) -> Result<Vec<String>> {
        match self {
            PromptSpec::Classname => Ok(vec![classname.to_string()]),
            PromptSpec::Template { template, .. } => {
                if !template.contains("{cls}") {
                    return Err(Error::Config(format!("template `{template}` has no {{cls}}")));
                }
                Ok(vec![template.replace("{cls}", classname)])
            }
            PromptSpec::Gpt { asset, key } => match asset.strings(classname, key) {
                Some(s) if !s.is_empty() => Ok(s.to_vec()),
                _ => Err(Error::Config(format!(
                    "prompt asset has no `{key}` strings for class `{classname}`"
                ))),
            },
            PromptSpec::Coop { .. } => Err(Error::Config(
                "CoOp prompts are learned embeddings, not text".into(),
            )),
        }
    }
}

/// A text-prompt column label as used on the command line and in result
/// tables: `none`, `classname`, `vanilla`, `hand_crafted`, an asset key
/// such as `gpt0`, or `coop<M>`.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptChoice {
    None,
    Fixed(PromptSpec),
    Coop(usize),
}

impl PromptChoice {
    pub fn parse(label: &str, asset: &PromptAsset) -> Result<Self> {
        match label {
            "none" => return Ok(PromptChoice::None),
            "classname" => return Ok(PromptChoice::Fixed(PromptSpec::Classname)),
            "vanilla" => return Ok(PromptChoice::Fixed(PromptSpec::vanilla())),
            "hand_crafted" | "hand-crafted" => return Ok(PromptChoice::Fixed(PromptSpec::hand_crafted())),
            _ => {}
        }
        if let Some(m) = label.strip_prefix("coop") {
            let m: usize = m
                .parse()
                .map_err(|_| Error::Config(format!("`{label}`: expected coop followed by a context length")))?;
            if m < 1 {
                return Err(Error::Config("CoOp needs at least one context vector".into()));
            }
            return Ok(PromptChoice::Coop(m));
        }
        if asset.0.values().any(|keys| keys.contains_key(label)) {
            return Ok(PromptChoice::Fixed(PromptSpec::gpt(asset.clone(), label)));
        }
        Err(Error::Config(format!("unknown text prompt `{label}`")))
    }
}

/// One text feature with the class index it stands for.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeature {
    pub label: usize,
    pub feature: Vec<f64>,
}

/// Renders every class prompt for a fixed scheme and encodes it once.
pub fn encode_fixed_prompts(
    spec: &PromptSpec,
    classnames: &[String],
    encoder: &ToyTextEncoder,
) -> Result<Vec<TextFeature>> {
    let mut out = Vec::new();
    for (label, name) in classnames.iter().enumerate() {
        for prompt in spec.render(name)? {
            let ids = toy_tokenize(&prompt)?;
            let (feature, _) = encoder.encode(EncoderInput::Ids(&ids))?;
            out.push(TextFeature { label, feature });
        }
    }
    Ok(out)
}
