use crate::error::{Error, Result};

/// One block of a grouped attention: every query row attends to exactly the
/// listed key rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionGroup {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
}

/// A set of disjoint attention blocks over shared Q/K/V matrices.
///
/// Plain multi-head attention is the single group "all queries x all keys";
/// the spatial and temporal variants split the token grid into one group per
/// frame or per part plus a global group for the class token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionPlan {
    groups: Vec<AttentionGroup>,
    query_rows: usize,
    key_rows: usize,
}

impl AttentionPlan {
    pub fn new(groups: Vec<AttentionGroup>, query_rows: usize, key_rows: usize) -> Result<Self> {
        let mut seen = vec![false; query_rows];
        for g in &groups {
            if g.keys.is_empty() {
                return Err(Error::EmptyReduction("attention group with no keys"));
            }
            for &k in &g.keys {
                if k >= key_rows {
                    return Err(Error::IndexOutOfRange {
                        what: "attention key",
                        index: k,
                        len: key_rows,
                    });
                }
            }
            for &q in &g.queries {
                if q >= query_rows {
                    return Err(Error::IndexOutOfRange {
                        what: "attention query",
                        index: q,
                        len: query_rows,
                    });
                }
                if std::mem::replace(&mut seen[q], true) {
                    return Err(Error::Invariant(format!(
                        "query row {q} assigned to more than one attention group"
                    )));
                }
            }
        }
        Ok(AttentionPlan {
            groups,
            query_rows,
            key_rows,
        })
    }

    /// Every query attends to every key.
    pub fn dense(query_rows: usize, key_rows: usize) -> Result<Self> {
        Self::new(
            vec![AttentionGroup {
                queries: (0..query_rows).collect(),
                keys: (0..key_rows).collect(),
            }],
            query_rows,
            key_rows,
        )
    }

    pub fn groups(&self) -> &[AttentionGroup] {
        &self.groups
    }

    pub fn query_rows(&self) -> usize {
        self.query_rows
    }

    pub fn key_rows(&self) -> usize {
        self.key_rows
    }

    /// Number of query-key score entries per head.
    pub fn score_entries(&self) -> usize {
        self.groups
            .iter()
            .map(|g| g.queries.len() * g.keys.len())
            .sum()
    }
}
