//! Embedding-space primitives: cosine scoring against attribute embeddings,
//! attribute/LLM prompt rendering and the attribute catalog built from LLM
//! responses.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};

/// Cosine similarity of two non-zero vectors.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            context: "cosine similarity",
            expected: u.len(),
            found: v.len(),
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 {
        return Err(Error::ZeroNorm {
            context: "cosine lhs",
        });
    }
    if nv == 0.0 {
        return Err(Error::ZeroNorm {
            context: "cosine rhs",
        });
    }
    Ok(clamp_unit(dot(u, v) / (nu * nv)))
}

#[inline]
fn clamp_unit(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Cosine of `e_v` against every row of `e_att`, in row order.
pub fn attribute_scores(e_v: &[f64], e_att: &Matrix) -> Result<Vec<f64>> {
    if e_v.len() != e_att.cols() {
        return Err(Error::DimensionMismatch {
            context: "attribute scores",
            expected: e_att.cols(),
            found: e_v.len(),
        });
    }
    let nv = norm(e_v);
    if nv == 0.0 {
        return Err(Error::ZeroNorm {
            context: "visual embedding",
        });
    }
    e_att
        .iter_rows()
        .map(|row| {
            let nr = norm(row);
            if nr == 0.0 {
                return Err(Error::ZeroNorm {
                    context: "attribute row",
                });
            }
            Ok(clamp_unit(dot(e_v, row) / (nv * nr)))
        })
        .collect()
}

/// Attribute category `Z` used both in the LLM request and in the attribute
/// prompt template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Shape,
    Size,
    Texture,
    Color,
    Material,
    Function,
    Behavior,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::Shape,
        Category::Size,
        Category::Texture,
        Category::Color,
        Category::Material,
        Category::Function,
        Category::Behavior,
    ];

    /// Categories requested when none are configured.
    pub const DEFAULT: [Category; 6] = [
        Category::Shape,
        Category::Size,
        Category::Texture,
        Category::Color,
        Category::Material,
        Category::Function,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Shape => "shape",
            Category::Size => "size",
            Category::Texture => "texture",
            Category::Color => "color",
            Category::Material => "material",
            Category::Function => "function",
            Category::Behavior => "behavior",
        }
    }

    /// Verb phrase placed between "object which" and the category name.
    pub fn copula(self) -> &'static str {
        match self {
            Category::Shape
            | Category::Size
            | Category::Texture
            | Category::Color
            | Category::Material => "has",
            Category::Function | Category::Behavior => "is for",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_lowercase();
        Category::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == key)
            .ok_or_else(|| Error::UnknownCategory {
                name: s.to_owned(),
                known: Category::ALL
                    .iter()
                    .map(|c| c.as_str())
                    .collect::<Vec<_>>()
                    .join(", "),
            })
    }
}

/// Lowercase, trim and collapse internal whitespace.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeEntry {
    pub text: String,
    pub category: Category,
    /// Classes whose LLM response produced this attribute.
    pub sources: Vec<String>,
}

impl AttributeEntry {
    pub fn new(category: Category, text: &str, source: &str) -> Self {
        Self {
            text: normalize_text(text),
            category,
            sources: alloc::vec![source.to_owned()],
        }
    }
}

/// `object which <copula> <category> is <attribute>`
pub fn render_attribute_prompt(entry: &AttributeEntry) -> Result<String> {
    let text = normalize_text(&entry.text);
    if text.is_empty() {
        return Err(Error::EmptyAttributeText);
    }
    Ok(format!(
        "object which {} {} is {}",
        entry.category.copula(),
        entry.category.as_str(),
        text
    ))
}

/// Attribute strings plus (optionally) their `N x D` text embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeCatalog {
    pub entries: Vec<AttributeEntry>,
    #[serde(skip)]
    embeddings: Option<Matrix>,
}

impl AttributeCatalog {
    /// Builds a catalog, collapsing duplicate `(category, text)` pairs and
    /// merging their sources.
    pub fn new(entries: Vec<AttributeEntry>) -> Result<Self> {
        let mut out: Vec<AttributeEntry> = Vec::new();
        let mut index: BTreeMap<(Category, String), usize> = BTreeMap::new();
        for mut e in entries {
            e.text = normalize_text(&e.text);
            if e.text.is_empty() {
                return Err(Error::EmptyAttributeText);
            }
            match index.get(&(e.category, e.text.clone())) {
                Some(&i) => {
                    for s in e.sources {
                        if !out[i].sources.contains(&s) {
                            out[i].sources.push(s);
                        }
                    }
                }
                None => {
                    index.insert((e.category, e.text.clone()), out.len());
                    out.push(e);
                }
            }
        }
        if out.is_empty() {
            return Err(Error::EmptyCatalog);
        }
        Ok(Self {
            entries: out,
            embeddings: None,
        })
    }

    /// Attaches the `N x D` embedding matrix; every row must be non-zero.
    pub fn with_embeddings(mut self, embeddings: Matrix) -> Result<Self> {
        if embeddings.rows() != self.entries.len() {
            return Err(Error::DimensionMismatch {
                context: "attribute embeddings rows",
                expected: self.entries.len(),
                found: embeddings.rows(),
            });
        }
        if embeddings.iter_rows().any(|r| norm(r) == 0.0) {
            return Err(Error::ZeroNorm {
                context: "attribute row",
            });
        }
        self.embeddings = Some(embeddings);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn embeddings(&self) -> Option<&Matrix> {
        self.embeddings.as_ref()
    }

    /// Rendered text-encoder prompts, one per entry.
    pub fn prompts(&self) -> Result<Vec<String>> {
        self.entries.iter().map(render_attribute_prompt).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmPrompt {
    pub class_name: String,
    pub category: Category,
    pub prompt: String,
}

/// LLM requests, one per `(class, category)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub prompts: Vec<LlmPrompt>,
}

pub fn render_llm_prompt(class_name: &str, category: Category) -> String {
    format!(
        "I am using a language-vision model to identify {c}. List the {z} attributes of {c}, which will be used for detection.",
        c = class_name,
        z = category.as_str()
    )
}

pub fn render_llm_requests(
    class_names: &[String],
    categories: &[Category],
) -> Result<PromptRequest> {
    if class_names.is_empty() {
        return Err(Error::EmptyInput("class names"));
    }
    let mut seen: Vec<&str> = Vec::new();
    let mut prompts = Vec::new();
    for class in class_names {
        let class = class.trim();
        if seen.contains(&class) {
            continue;
        }
        seen.push(class);
        let mut cats: Vec<Category> = Vec::new();
        for &z in categories {
            if cats.contains(&z) {
                continue;
            }
            cats.push(z);
            prompts.push(LlmPrompt {
                class_name: class.to_string(),
                category: z,
                prompt: render_llm_prompt(class, z),
            });
        }
    }
    Ok(PromptRequest { prompts })
}

/// Parsed LLM answer for one `(class, category)` request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeResponse {
    pub class_name: String,
    pub category: Category,
    pub attributes: Vec<String>,
}

/// Union of all responses with normalized-text dedup; source classes are kept.
pub fn ingest_attribute_responses(responses: &[AttributeResponse]) -> Result<AttributeCatalog> {
    let entries: Vec<AttributeEntry> = responses
        .iter()
        .flat_map(|r| {
            r.attributes
                .iter()
                .filter(|a| !normalize_text(a).is_empty())
                .map(move |a| AttributeEntry::new(r.category, a, &r.class_name))
        })
        .collect();
    if entries.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    AttributeCatalog::new(entries)
}
