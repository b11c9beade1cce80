//! Rule-based token roles over the segment grammar.
//!
//! Two views of the same state machine are exposed:
//!
//! * [`label_tokens`] assigns each token the role of the span it belongs
//!   to, markers included. This is what the training masks use.
//! * [`generation_roles`] assigns each token the role of the router state
//!   *before* it was emitted, i.e. which capability decided to emit it. The
//!   two only differ on `<search>`: the reasoning side decides to invoke the
//!   tool, so the opener is generated by the reasoning role while it is
//!   labeled as a tool token.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Reasoning,
    Tool,
    Env,
}

impl Role {
    pub fn short(self) -> &'static str {
        match self {
            Role::Reasoning => "r",
            Role::Tool => "a",
            Role::Env => "env",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Reasoning => "reasoning",
            Role::Tool => "tool",
            Role::Env => "env",
        })
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reasoning" | "r" | "reas" => Ok(Role::Reasoning),
            "tool" | "a" => Ok(Role::Tool),
            "env" => Ok(Role::Env),
            other => Err(Error::Unknown {
                kind: "role",
                name: other.to_string(),
            }),
        }
    }
}

/// Which token roles a training mask keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskVariant {
    Reas,
    Tool,
    Unified,
}

impl FromStr for MaskVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "reas" | "reasoning" => Ok(MaskVariant::Reas),
            "tool" => Ok(MaskVariant::Tool),
            "unified" | "uni" => Ok(MaskVariant::Unified),
            other => Err(Error::Unknown {
                kind: "mask variant",
                name: other.to_string(),
            }),
        }
    }
}

impl MaskVariant {
    pub fn keeps(self, role: Role) -> bool {
        matches!(
            (self, role),
            (MaskVariant::Reas, Role::Reasoning)
                | (MaskVariant::Tool, Role::Tool)
                | (MaskVariant::Unified, Role::Reasoning | Role::Tool)
        )
    }
}

/// Reserved marker ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentGrammar {
    pub think_open: TokenId,
    pub think_close: TokenId,
    pub search_open: TokenId,
    pub search_close: TokenId,
    pub info_open: TokenId,
    pub info_close: TokenId,
    pub answer_open: TokenId,
    pub answer_close: TokenId,
}

impl Default for SegmentGrammar {
    fn default() -> Self {
        SegmentGrammar {
            think_open: 1,
            think_close: 2,
            search_open: 3,
            search_close: 4,
            info_open: 5,
            info_close: 6,
            answer_open: 7,
            answer_close: 8,
        }
    }
}

impl SegmentGrammar {
    pub fn markers(&self) -> [TokenId; 8] {
        [
            self.think_open,
            self.think_close,
            self.search_open,
            self.search_close,
            self.info_open,
            self.info_close,
            self.answer_open,
            self.answer_close,
        ]
    }

    pub fn is_marker(&self, t: TokenId) -> bool {
        self.markers().contains(&t)
    }

    /// Markers must be pairwise distinct and below `content_start`.
    pub fn validate(&self, content_start: TokenId) -> Result<()> {
        let m = self.markers();
        for (i, a) in m.iter().enumerate() {
            if *a >= content_start {
                return Err(Error::contract(format!(
                    "marker id {a} overlaps the content range starting at {content_start}"
                )));
            }
            if m[i + 1..].contains(a) {
                return Err(Error::contract(format!("marker id {a} is reserved twice")));
            }
        }
        Ok(())
    }

    pub fn name_of(&self, t: TokenId) -> Option<&'static str> {
        const NAMES: [&str; 8] = [
            "<think>",
            "</think>",
            "<search>",
            "</search>",
            "<information>",
            "</information>",
            "<answer>",
            "</answer>",
        ];
        self.markers().iter().position(|&m| m == t).map(|i| NAMES[i])
    }
}

/// Span the state machine is currently inside.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RouterState {
    #[default]
    Free,
    Think,
    Search,
    Info,
    Answer,
}

impl RouterState {
    pub fn role(self) -> Role {
        match self {
            RouterState::Search => Role::Tool,
            RouterState::Info => Role::Env,
            _ => Role::Reasoning,
        }
    }
}

/// Incremental router: feeds one token at a time.
#[derive(Debug, Clone, Default)]
pub struct Router {
    grammar: SegmentGrammar,
    state: RouterState,
    anomalies: usize,
}

impl Router {
    pub fn new(grammar: SegmentGrammar) -> Self {
        Router {
            grammar,
            state: RouterState::Free,
            anomalies: 0,
        }
    }

    pub fn state(&self) -> RouterState {
        self.state
    }

    /// Role of whatever token comes next, given the prefix consumed so far.
    pub fn next_role(&self) -> Role {
        self.state.role()
    }

    pub fn anomalies(&self) -> usize {
        self.anomalies
    }

    /// Consumes `t` and returns its span label.
    pub fn feed(&mut self, t: TokenId) -> Role {
        let g = &self.grammar;
        let opened = if t == g.think_open {
            Some(RouterState::Think)
        } else if t == g.search_open {
            Some(RouterState::Search)
        } else if t == g.info_open {
            Some(RouterState::Info)
        } else if t == g.answer_open {
            Some(RouterState::Answer)
        } else {
            None
        };
        if let Some(next) = opened {
            // Last opener wins; an opener inside another span is malformed.
            if self.state != RouterState::Free {
                self.anomalies += 1;
            }
            self.state = next;
            return next.role();
        }
        let closes = [
            (g.think_close, RouterState::Think),
            (g.search_close, RouterState::Search),
            (g.info_close, RouterState::Info),
            (g.answer_close, RouterState::Answer),
        ];
        if let Some(&(_, span)) = closes.iter().find(|(c, _)| *c == t) {
            let label = if self.state == span {
                span.role()
            } else {
                self.anomalies += 1;
                // A stray closer belongs to whatever span we are in.
                self.state.role()
            };
            self.state = RouterState::Free;
            return label;
        }
        self.state.role()
    }
}

/// Span labels for every token. Never fails; malformed nesting is resolved
/// by last-opener-wins and counted in the returned anomaly total.
pub fn label_tokens_counted(tokens: &[TokenId], grammar: &SegmentGrammar) -> (Vec<Role>, usize) {
    let mut r = Router::new(*grammar);
    let roles = tokens.iter().map(|&t| r.feed(t)).collect();
    (roles, r.anomalies())
}

pub fn label_tokens(tokens: &[TokenId], grammar: &SegmentGrammar) -> Vec<Role> {
    label_tokens_counted(tokens, grammar).0
}

/// Role of the router state before each token was emitted.
pub fn generation_roles(tokens: &[TokenId], grammar: &SegmentGrammar) -> Vec<Role> {
    let mut r = Router::new(*grammar);
    tokens
        .iter()
        .map(|&t| {
            let role = r.next_role();
            r.feed(t);
            role
        })
        .collect()
}

pub fn build_mask(roles: &[Role], variant: MaskVariant) -> Vec<u8> {
    roles.iter().map(|&r| u8::from(variant.keeps(r))).collect()
}
