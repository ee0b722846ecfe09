//! Clinician-authored inputs: pattern pack, safety rules, questionnaire
//! tree, templates, intent lexicon, linking guidelines and fixture KBs.

use thiserror::Error;

use crate::dialogue::{IntentLexicon, TemplateTable};
use crate::ingest::{compile_patterns, parse_pattern_pack, CompiledPattern, ExtractionPattern};
use crate::kg::KnowledgeGraph;
use crate::link::{parse_guidelines, GuidelineRule};
use crate::safety::{parse_constraints, PathConstraint};
use crate::screeners::{load_tree, QuestionnaireTree};

pub const BUNDLED_PATTERNS: &str = include_str!("../data/patterns.json");
pub const BUNDLED_RULES: &str = include_str!("../data/safety.rules");
pub const BUNDLED_TREE: &str = include_str!("../data/cssrs-tree.json");
pub const BUNDLED_TEMPLATES: &str = include_str!("../data/templates.json");
pub const BUNDLED_LEXICON: &str = include_str!("../data/intent-lexicon.json");
pub const BUNDLED_GUIDELINES: &str = include_str!("../data/guidelines.json");
pub const BUNDLED_MAYO: &str = include_str!("../data/mayo-fixture.tsv");
pub const BUNDLED_UMLS: &str = include_str!("../data/umls-fixture.tsv");
pub const BUNDLED_SCREENER_CORPUS: &str = include_str!("../data/screener-corpus.jsonl");

#[derive(Debug, Error)]
#[error("{source_name}: {message}")]
pub struct ResourceError {
    pub source_name: String,
    pub message: String,
}

fn err(source_name: &str, e: impl std::fmt::Display) -> ResourceError {
    ResourceError { source_name: source_name.to_string(), message: e.to_string() }
}

/// Raw file contents, each tagged with a name used in error messages.
#[derive(Debug, Clone)]
pub struct ResourceSources {
    pub patterns: (String, String),
    pub rules: (String, String),
    pub tree: (String, String),
    pub templates: (String, String),
    pub lexicon: (String, String),
    pub guidelines: (String, String),
    /// (graph id, name, TSV text)
    pub kbs: Vec<(String, String, String)>,
}

impl ResourceSources {
    pub fn bundled() -> Self {
        let s = |name: &str, text: &str| (name.to_string(), text.to_string());
        ResourceSources {
            patterns: s("patterns.json", BUNDLED_PATTERNS),
            rules: s("safety.rules", BUNDLED_RULES),
            tree: s("cssrs-tree.json", BUNDLED_TREE),
            templates: s("templates.json", BUNDLED_TEMPLATES),
            lexicon: s("intent-lexicon.json", BUNDLED_LEXICON),
            guidelines: s("guidelines.json", BUNDLED_GUIDELINES),
            kbs: vec![
                ("mayo-fixture".into(), "mayo-fixture.tsv".into(), BUNDLED_MAYO.into()),
                ("umls-fixture".into(), "umls-fixture.tsv".into(), BUNDLED_UMLS.into()),
            ],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Resources {
    pub pattern_specs: Vec<ExtractionPattern>,
    pub patterns: Vec<CompiledPattern>,
    pub constraints: Vec<PathConstraint>,
    pub tree: QuestionnaireTree,
    pub templates: TemplateTable,
    pub lexicon: IntentLexicon,
    pub guidelines: Vec<GuidelineRule>,
    pub kbs: Vec<KnowledgeGraph>,
}

impl Resources {
    /// Parses and validates everything; the first failure names its source.
    pub fn load(src: &ResourceSources) -> Result<Self, ResourceError> {
        let pattern_specs = parse_pattern_pack(&src.patterns.1).map_err(|e| err(&src.patterns.0, e))?;
        let patterns = compile_patterns(&pattern_specs).map_err(|e| err(&src.patterns.0, e))?;
        let constraints = parse_constraints(&src.rules.1).map_err(|e| err(&src.rules.0, e))?;
        let tree = load_tree(&src.tree.1).map_err(|e| err(&src.tree.0, e))?;
        let templates = TemplateTable::from_json(&src.templates.1).map_err(|e| err(&src.templates.0, e))?;
        let lexicon = IntentLexicon::from_json(&src.lexicon.1).map_err(|e| err(&src.lexicon.0, e))?;
        let guidelines = parse_guidelines(&src.guidelines.1).map_err(|e| err(&src.guidelines.0, e))?;
        crate::link::resolve_conflicts(&[], &guidelines).map_err(|e| err(&src.guidelines.0, e))?;
        let kbs = src
            .kbs
            .iter()
            .map(|(id, name, text)| KnowledgeGraph::from_tsv(id.clone(), text).map_err(|e| err(name, e)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Resources { pattern_specs, patterns, constraints, tree, templates, lexicon, guidelines, kbs })
    }

    pub fn bundled() -> Self {
        Self::load(&ResourceSources::bundled()).expect("bundled resources are valid")
    }
}
