use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::types::TokenId;

/// Restricts which tokens may follow a generated prefix.
pub trait Constraint: Send + Sync {
    /// Tokens allowed after `prefix`. An empty result is a dead end.
    fn allowed(&self, prefix: &[TokenId]) -> Vec<TokenId>;

    /// Whether a finished sequence is a valid output.
    fn accepts(&self, seq: &[TokenId]) -> bool {
        (0..seq.len()).all(|i| self.allowed(&seq[..i]).contains(&seq[i]))
    }
}

/// Prefix trie over a finite set of EOS-terminated valid outputs.
#[derive(Debug, Clone, Default)]
pub struct PrefixTrie {
    nodes: Vec<TrieNode>,
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: BTreeMap<TokenId, usize>,
    terminal: bool,
}

impl PrefixTrie {
    pub fn new<I, S>(sequences: I, eos: TokenId) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[TokenId]>,
    {
        let mut trie = PrefixTrie {
            nodes: vec![TrieNode::default()],
        };
        for seq in sequences {
            let seq = seq.as_ref();
            match seq.iter().position(|&t| t == eos) {
                Some(p) if p + 1 == seq.len() => {}
                _ => {
                    return Err(Error::InvalidParameter(format!(
                        "trie sequence {seq:?} must end with EOS and contain it once"
                    )))
                }
            }
            let mut node = 0;
            for &tok in seq {
                node = match trie.nodes[node].children.get(&tok) {
                    Some(&child) => child,
                    None => {
                        trie.nodes.push(TrieNode::default());
                        let child = trie.nodes.len() - 1;
                        trie.nodes[node].children.insert(tok, child);
                        child
                    }
                };
            }
            trie.nodes[node].terminal = true;
        }
        if trie.nodes.len() == 1 {
            return Err(Error::InvalidParameter("trie needs at least one sequence".into()));
        }
        Ok(trie)
    }

    fn walk(&self, prefix: &[TokenId]) -> Option<usize> {
        prefix
            .iter()
            .try_fold(0usize, |node, tok| self.nodes[node].children.get(tok).copied())
    }

    /// All stored sequences in lexicographic order.
    pub fn sequences(&self) -> Vec<Vec<TokenId>> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((node, seq)) = stack.pop() {
            if self.nodes[node].terminal {
                out.push(seq.clone());
            }
            for (&tok, &child) in self.nodes[node].children.iter().rev() {
                let mut next = seq.clone();
                next.push(tok);
                stack.push((child, next));
            }
        }
        out
    }
}

impl Constraint for PrefixTrie {
    fn allowed(&self, prefix: &[TokenId]) -> Vec<TokenId> {
        self.walk(prefix)
            .map(|n| self.nodes[n].children.keys().copied().collect())
            .unwrap_or_default()
    }

    fn accepts(&self, seq: &[TokenId]) -> bool {
        self.walk(seq).is_some_and(|n| self.nodes[n].terminal)
    }
}

pub type PredicateFn = dyn Fn(&[TokenId]) -> Vec<TokenId> + Send + Sync;

/// Either an explicit trie of valid outputs or an opaque
/// prefix-to-allowed-tokens function.
#[derive(Clone)]
pub enum ConstraintSpec {
    Trie(PrefixTrie),
    Predicate(Arc<PredicateFn>),
}

impl ConstraintSpec {
    pub fn predicate(f: impl Fn(&[TokenId]) -> Vec<TokenId> + Send + Sync + 'static) -> Self {
        Self::Predicate(Arc::new(f))
    }
}

impl fmt::Debug for ConstraintSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Trie(t) => f.debug_tuple("Trie").field(&t.sequences()).finish(),
            Self::Predicate(_) => f.write_str("Predicate(..)"),
        }
    }
}

impl Constraint for ConstraintSpec {
    fn allowed(&self, prefix: &[TokenId]) -> Vec<TokenId> {
        match self {
            Self::Trie(t) => t.allowed(prefix),
            Self::Predicate(p) => p(prefix),
        }
    }

    fn accepts(&self, seq: &[TokenId]) -> bool {
        match self {
            Self::Trie(t) => t.accepts(seq),
            Self::Predicate(_) => (0..seq.len()).all(|i| self.allowed(&seq[..i]).contains(&seq[i])),
        }
    }
}
