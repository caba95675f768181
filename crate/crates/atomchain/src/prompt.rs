//! Prompt templates for the chain stages and claim-generation prompts.
//!
//! A bundle file holds one section per template (`=== stage: <id>` with
//! `SYSTEM:` and `USER:` blocks) plus one `=== example: <id>` section per
//! chain stage. Placeholders are a fixed vocabulary of angle-bracket
//! tokens; which of them a stage declares is part of the stage contract,
//! not the file. Rendering is two-phase: the stage exemplar is spliced at
//! `<example>` first, then one literal left-to-right substitution pass
//! fills placeholders, so substituted values are never re-expanded.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

/// The bundle shipped with the crate: six chain stages with their
/// exemplars plus the four claim-generation prompts.
pub const DEFAULT_BUNDLE: &str = include_str!("../templates/default.tmpl");

/// Token that marks where a stage's exemplar is spliced.
pub const EXAMPLE_TOKEN: &str = "<example>";

/// Every template the pipeline renders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TemplateId {
    Interpret,
    Plan,
    Cell,
    Reason,
    Recap,
    Conclusion,
    PositiveClaims,
    NegativeFlip,
    NegativeManipulate,
    OosRewrite,
}

impl TemplateId {
    pub const ALL: [TemplateId; 10] = [
        TemplateId::Interpret,
        TemplateId::Plan,
        TemplateId::Cell,
        TemplateId::Reason,
        TemplateId::Recap,
        TemplateId::Conclusion,
        TemplateId::PositiveClaims,
        TemplateId::NegativeFlip,
        TemplateId::NegativeManipulate,
        TemplateId::OosRewrite,
    ];

    /// The six reasoning stages, in chain order.
    pub const CHAIN: [TemplateId; 6] = [
        TemplateId::Interpret,
        TemplateId::Plan,
        TemplateId::Cell,
        TemplateId::Reason,
        TemplateId::Recap,
        TemplateId::Conclusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateId::Interpret => "interpret",
            TemplateId::Plan => "plan",
            TemplateId::Cell => "cell",
            TemplateId::Reason => "reason",
            TemplateId::Recap => "recap",
            TemplateId::Conclusion => "conclusion",
            TemplateId::PositiveClaims => "positive_claims",
            TemplateId::NegativeFlip => "negative_flip",
            TemplateId::NegativeManipulate => "negative_manipulate",
            TemplateId::OosRewrite => "oos_rewrite",
        }
    }

    pub fn from_name(name: &str) -> Option<TemplateId> {
        TemplateId::ALL.into_iter().find(|id| id.name() == name)
    }

    pub fn is_chain_stage(self) -> bool {
        TemplateId::CHAIN.contains(&self)
    }

    /// The placeholders this template's bodies may use and its render
    /// context must supply, exactly.
    pub fn declared(self) -> &'static [Placeholder] {
        use Placeholder::*;
        match self {
            TemplateId::Interpret => &[Caption, Table, Claim],
            TemplateId::Plan => &[Caption, Table, Claim, Interpretation],
            TemplateId::Cell => &[Caption, Table, Claim, Subplan, PlanIdx],
            TemplateId::Reason => &[Caption, Table, Claim, Subplan, PlanIdx, GroundingExtraction],
            TemplateId::Recap => &[Caption, Table, Claim, Plan, Subplan, Reasoning, PlanIdx],
            TemplateId::Conclusion => &[Caption, Table, Claim, Plan, AllReasonTransition],
            TemplateId::PositiveClaims => &[Caption, Table],
            TemplateId::NegativeFlip
            | TemplateId::NegativeManipulate
            | TemplateId::OosRewrite => &[Caption, Table, Claim],
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())
    }
}

/// The fixed placeholder vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Placeholder {
    Caption,
    Table,
    Claim,
    Interpretation,
    Plan,
    Subplan,
    PlanIdx,
    GroundingExtraction,
    Reasoning,
    AllReasonTransition,
}

impl Placeholder {
    pub const ALL: [Placeholder; 10] = [
        Placeholder::Caption,
        Placeholder::Table,
        Placeholder::Claim,
        Placeholder::Interpretation,
        Placeholder::Plan,
        Placeholder::Subplan,
        Placeholder::PlanIdx,
        Placeholder::GroundingExtraction,
        Placeholder::Reasoning,
        Placeholder::AllReasonTransition,
    ];

    /// The literal token as it appears in template bodies.
    pub fn token(self) -> &'static str {
        match self {
            Placeholder::Caption => "<caption>",
            Placeholder::Table => "<table>",
            Placeholder::Claim => "<claim>",
            Placeholder::Interpretation => "<interpretation>",
            Placeholder::Plan => "<plan>",
            Placeholder::Subplan => "<subplan>",
            Placeholder::PlanIdx => "<plan_idx>",
            Placeholder::GroundingExtraction => "<grounding&extraction>",
            Placeholder::Reasoning => "<reasoning>",
            Placeholder::AllReasonTransition => "<allReasonTransition>",
        }
    }

    pub fn from_token(token: &str) -> Option<Placeholder> {
        Placeholder::ALL.into_iter().find(|p| p.token() == token)
    }
}

impl fmt::Display for Placeholder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.token())
    }
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("failed to read template bundle: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: unknown section {name:?}")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: unknown stage {name:?}")]
    UnknownStage { line: usize, name: String },
    #[error("line {line}: duplicate section for {name:?}")]
    DuplicateSection { line: usize, name: String },
    #[error("stage {stage} is missing its {block} block")]
    MissingBlock { stage: String, block: &'static str },
    #[error("bundle is missing the {name} template")]
    MissingStage { name: String },
    #[error("chain stage {stage} has no exemplar section")]
    MissingExemplar { stage: String },
    #[error("line {line}: {name} is not a chain stage and takes no exemplar")]
    UnexpectedExemplar { line: usize, name: String },
    #[error("exemplar for {stage} contains the <example> token")]
    RecursiveExample { stage: String },
    #[error("template {stage} uses {token} which it does not declare")]
    UndeclaredPlaceholder { stage: String, token: String },
    #[error("context for {stage} is missing {token}")]
    MissingPlaceholder { stage: String, token: String },
    #[error("context for {stage} supplies undeclared {token}")]
    UndeclaredContextKey { stage: String, token: String },
}

/// One template's bodies, which may reference the stage exemplar via
/// `<example>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub system: String,
    pub user: String,
}

/// Values for one render call.
#[derive(Debug, Clone, Default)]
pub struct RenderContext {
    values: BTreeMap<Placeholder, String>,
}

impl RenderContext {
    pub fn new() -> Self {
        RenderContext::default()
    }

    pub fn set(mut self, placeholder: Placeholder, value: impl Into<String>) -> Self {
        self.values.insert(placeholder, value.into());
        self
    }

    pub fn keys(&self) -> impl Iterator<Item = Placeholder> + '_ {
        self.values.keys().copied()
    }
}

/// System and user messages ready to send.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
}

/// A parsed bundle: all ten templates plus the six chain exemplars.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateId, PromptTemplate>,
    exemplars: BTreeMap<TemplateId, String>,
}

impl TemplateSet {
    /// The bundle compiled into the crate.
    pub fn default_bundle() -> TemplateSet {
        TemplateSet::parse(DEFAULT_BUNDLE).expect("built-in bundle is valid")
    }

    pub fn load(path: &Path) -> Result<TemplateSet, TemplateError> {
        TemplateSet::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), TemplateError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Parses bundle text, checking completeness and the placeholder
    /// discipline of every body.
    pub fn parse(text: &str) -> Result<TemplateSet, TemplateError> {
        enum Block {
            None,
            System,
            User,
        }
        struct Section {
            kind: SectionKind,
            id: TemplateId,
        }
        enum SectionKind {
            Stage,
            Example,
        }

        let mut templates: BTreeMap<TemplateId, PromptTemplate> = BTreeMap::new();
        let mut exemplars: BTreeMap<TemplateId, String> = BTreeMap::new();

        let mut section: Option<Section> = None;
        let mut block = Block::None;
        let mut system_lines: Option<Vec<&str>> = None;
        let mut user_lines: Option<Vec<&str>> = None;
        let mut example_lines: Vec<&str> = Vec::new();

        fn finish_body(lines: Vec<&str>) -> String {
            let mut lines = lines;
            while lines.last().is_some_and(|l| l.trim().is_empty()) {
                lines.pop();
            }
            lines.join("\n")
        }

        let close_section = |section: &Option<Section>,
                                 system_lines: &mut Option<Vec<&str>>,
                                 user_lines: &mut Option<Vec<&str>>,
                                 example_lines: &mut Vec<&str>,
                                 templates: &mut BTreeMap<TemplateId, PromptTemplate>,
                                 exemplars: &mut BTreeMap<TemplateId, String>|
         -> Result<(), TemplateError> {
            let Some(section) = section else {
                return Ok(());
            };
            match section.kind {
                SectionKind::Stage => {
                    let system = system_lines.take().ok_or(TemplateError::MissingBlock {
                        stage: section.id.name().to_string(),
                        block: "SYSTEM:",
                    })?;
                    let user = user_lines.take().ok_or(TemplateError::MissingBlock {
                        stage: section.id.name().to_string(),
                        block: "USER:",
                    })?;
                    templates.insert(
                        section.id,
                        PromptTemplate { system: finish_body(system), user: finish_body(user) },
                    );
                }
                SectionKind::Example => {
                    exemplars.insert(section.id, finish_body(std::mem::take(example_lines)));
                }
            }
            Ok(())
        };

        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let header = line.strip_prefix("=== ");
            if let Some(header) = header {
                close_section(
                    &section,
                    &mut system_lines,
                    &mut user_lines,
                    &mut example_lines,
                    &mut templates,
                    &mut exemplars,
                )?;
                block = Block::None;

                let (kind, name) = if let Some(name) = header.strip_prefix("stage: ") {
                    (SectionKind::Stage, name.trim())
                } else if let Some(name) = header.strip_prefix("example: ") {
                    (SectionKind::Example, name.trim())
                } else {
                    return Err(TemplateError::UnknownSection {
                        line: lineno,
                        name: header.trim().to_string(),
                    });
                };
                let id = TemplateId::from_name(name).ok_or_else(|| TemplateError::UnknownStage {
                    line: lineno,
                    name: name.to_string(),
                })?;
                match kind {
                    SectionKind::Stage if templates.contains_key(&id) => {
                        return Err(TemplateError::DuplicateSection {
                            line: lineno,
                            name: name.to_string(),
                        });
                    }
                    SectionKind::Example if exemplars.contains_key(&id) => {
                        return Err(TemplateError::DuplicateSection {
                            line: lineno,
                            name: name.to_string(),
                        });
                    }
                    SectionKind::Example if !id.is_chain_stage() => {
                        return Err(TemplateError::UnexpectedExemplar {
                            line: lineno,
                            name: name.to_string(),
                        });
                    }
                    _ => {}
                }
                section = Some(Section { kind, id });
                continue;
            }

            let Some(current) = &section else {
                if line.trim().is_empty() {
                    continue;
                }
                return Err(TemplateError::UnknownSection {
                    line: lineno,
                    name: line.trim().to_string(),
                });
            };

            match current.kind {
                SectionKind::Stage => {
                    if line == "SYSTEM:" {
                        block = Block::System;
                        system_lines = Some(Vec::new());
                        continue;
                    }
                    if line == "USER:" {
                        block = Block::User;
                        user_lines = Some(Vec::new());
                        continue;
                    }
                    match block {
                        Block::System => system_lines.as_mut().unwrap().push(line),
                        Block::User => user_lines.as_mut().unwrap().push(line),
                        Block::None => {
                            if !line.trim().is_empty() {
                                return Err(TemplateError::UnknownSection {
                                    line: lineno,
                                    name: line.trim().to_string(),
                                });
                            }
                        }
                    }
                }
                SectionKind::Example => example_lines.push(line),
            }
        }
        close_section(
            &section,
            &mut system_lines,
            &mut user_lines,
            &mut example_lines,
            &mut templates,
            &mut exemplars,
        )?;

        let set = TemplateSet { templates, exemplars };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<(), TemplateError> {
        for id in TemplateId::ALL {
            let Some(template) = self.templates.get(&id) else {
                return Err(TemplateError::MissingStage { name: id.name().to_string() });
            };
            if id.is_chain_stage() && !self.exemplars.contains_key(&id) {
                return Err(TemplateError::MissingExemplar { stage: id.name().to_string() });
            }
            if let Some(exemplar) = self.exemplars.get(&id) {
                if exemplar.contains(EXAMPLE_TOKEN) {
                    return Err(TemplateError::RecursiveExample { stage: id.name().to_string() });
                }
            } else if template.system.contains(EXAMPLE_TOKEN) || template.user.contains(EXAMPLE_TOKEN) {
                return Err(TemplateError::MissingExemplar { stage: id.name().to_string() });
            }
            for body in [&template.system, &template.user] {
                let effective = match self.exemplars.get(&id) {
                    Some(exemplar) => body.replace(EXAMPLE_TOKEN, exemplar),
                    None => body.clone(),
                };
                for token in vocabulary_tokens(&effective) {
                    if !id.declared().contains(&token) {
                        return Err(TemplateError::UndeclaredPlaceholder {
                            stage: id.name().to_string(),
                            token: token.token().to_string(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Serializes back to bundle text; `parse` of the output reproduces
    /// this set exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for id in TemplateId::ALL {
            let template = &self.templates[&id];
            out.push_str(&format!("=== stage: {}\nSYSTEM:\n{}\nUSER:\n{}\n", id, template.system, template.user));
            if let Some(exemplar) = self.exemplars.get(&id) {
                out.push_str(&format!("=== example: {}\n{}\n", id, exemplar));
            }
        }
        out
    }

    pub fn template(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }

    /// The canonical exemplar text for a chain stage.
    pub fn exemplar(&self, id: TemplateId) -> Option<&str> {
        self.exemplars.get(&id).map(String::as_str)
    }

    /// Renders a template: exemplar splice, then one literal placeholder
    /// pass. The context must supply exactly the declared placeholders.
    pub fn render(&self, id: TemplateId, context: &RenderContext) -> Result<RenderedPrompt, TemplateError> {
        let declared = id.declared();
        for placeholder in declared {
            if !context.values.contains_key(placeholder) {
                return Err(TemplateError::MissingPlaceholder {
                    stage: id.name().to_string(),
                    token: placeholder.token().to_string(),
                });
            }
        }
        for key in context.keys() {
            if !declared.contains(&key) {
                return Err(TemplateError::UndeclaredContextKey {
                    stage: id.name().to_string(),
                    token: key.token().to_string(),
                });
            }
        }

        let template = &self.templates[&id];
        let render_body = |body: &str| -> String {
            let spliced = match self.exemplars.get(&id) {
                Some(exemplar) => body.replace(EXAMPLE_TOKEN, exemplar),
                None => body.to_string(),
            };
            substitute(&spliced, &context.values)
        };
        Ok(RenderedPrompt {
            system: render_body(&template.system),
            user: render_body(&template.user),
        })
    }
}

/// One left-to-right pass replacing vocabulary tokens with their values.
/// Substituted values are emitted verbatim and never rescanned.
fn substitute(body: &str, values: &BTreeMap<Placeholder, String>) -> String {
    let mut out = String::with_capacity(body.len());
    let mut rest = body;
    while let Some(i) = rest.find('<') {
        out.push_str(&rest[..i]);
        rest = &rest[i..];
        let replaced = rest
            .find('>')
            .and_then(|end| Placeholder::from_token(&rest[..=end]).map(|p| (p, end)))
            .and_then(|(p, end)| values.get(&p).map(|v| (v, end)));
        match replaced {
            Some((value, end)) => {
                out.push_str(value);
                rest = &rest[end + 1..];
            }
            None => {
                out.push('<');
                rest = &rest[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// All vocabulary tokens occurring in a body, in order.
fn vocabulary_tokens(body: &str) -> Vec<Placeholder> {
    let mut found = Vec::new();
    let mut rest = body;
    while let Some(i) = rest.find('<') {
        rest = &rest[i..];
        if let Some(end) = rest.find('>') {
            if let Some(p) = Placeholder::from_token(&rest[..=end]) {
                found.push(p);
                rest = &rest[end + 1..];
                continue;
            }
        }
        rest = &rest[1..];
    }
    found
}
