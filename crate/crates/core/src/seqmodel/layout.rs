use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// `[vision, queries, language]`: queries cannot see the instruction.
    Prior,
    /// `[vision, language, queries]`: queries see everything.
    Posterior,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Vision,
    Language,
    Query,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub role: Role,
    /// Absolute position of the first token.
    pub start: usize,
    pub tokens: Vec<usize>,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.start + self.tokens.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub branch: Branch,
    pub segments: Vec<Segment>,
}

thread_local! {
    static BUILT: [Cell<u64>; 2] = const { [Cell::new(0), Cell::new(0)] };
}

/// Layouts built on the current thread so far, per branch.
pub fn layouts_built(branch: Branch) -> u64 {
    BUILT.with(|c| c[branch as usize].get())
}

/// Token sequence for one branch.
///
/// Vision and language ids must lie in the base vocabulary `0..base_vocab`;
/// the query segment is always `base_vocab..base_vocab + num_queries`.
pub fn build_layout(
    branch: Branch,
    vision: &[usize],
    language: &[usize],
    base_vocab: usize,
    num_queries: usize,
    max_seq_len: usize,
) -> Result<SequenceLayout> {
    if num_queries == 0 {
        return Err(Error::contract("at least one query token is required"));
    }
    if vision.is_empty() || language.is_empty() {
        return Err(Error::contract("vision and language segments must be nonempty"));
    }
    if let Some(&t) = vision.iter().chain(language).find(|&&t| t >= base_vocab) {
        return Err(Error::Index(format!("token {t} outside base vocabulary of {base_vocab}")));
    }
    let len = vision.len() + language.len() + num_queries;
    if len > max_seq_len {
        return Err(Error::Length { len, max: max_seq_len });
    }
    let queries: Vec<usize> = (base_vocab..base_vocab + num_queries).collect();
    let order = match branch {
        Branch::Prior => [(Role::Vision, vision.to_vec()), (Role::Query, queries), (Role::Language, language.to_vec())],
        Branch::Posterior => [(Role::Vision, vision.to_vec()), (Role::Language, language.to_vec()), (Role::Query, queries)],
    };
    let mut start = 0;
    let segments = order
        .into_iter()
        .map(|(role, tokens)| {
            let s = Segment { role, start, tokens };
            start = s.end();
            s
        })
        .collect();
    BUILT.with(|c| c[branch as usize].set(c[branch as usize].get() + 1));
    Ok(SequenceLayout { branch, segments })
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, Segment::end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> Vec<usize> {
        self.segments.iter().flat_map(|s| s.tokens.iter().copied()).collect()
    }

    pub fn segment(&self, role: Role) -> Option<&Segment> {
        self.segments.iter().find(|s| s.role == role)
    }

    pub fn roles(&self) -> Vec<Role> {
        self.segments.iter().map(|s| s.role).collect()
    }

    /// Length of the leading vision segment, the part shared by both branches.
    pub fn prefix_len(&self) -> usize {
        self.segment(Role::Vision).map_or(0, Segment::end)
    }

    /// Everything after the vision prefix.
    pub fn suffix(&self) -> Vec<usize> {
        self.tokens()[self.prefix_len()..].to_vec()
    }
}
