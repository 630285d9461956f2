//! The sequential graph: item→item "immediately precedes" edges plus the
//! bipartite account–item interaction edges, built from training sequences.

use std::io::Write;

use crate::data::{AccountId, Dataset, ItemId};
use crate::error::{Error, Result};

/// Sorted, duplicate-free adjacency lists for both edge types.
///
/// `predecessors[i]` holds every `j` with `M_S[i][j] = 1`, i.e. item `j`
/// immediately precedes item `i` in some training sequence.
/// `items_of_account[k]` holds every `l` with `M_I[l][k] = 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequentialGraph {
    n_items: usize,
    n_accounts: usize,
    predecessors: Vec<Vec<usize>>,
    successors: Vec<Vec<usize>>,
    items_of_account: Vec<Vec<usize>>,
    accounts_of_item: Vec<Vec<usize>>,
}

/// Node of the composite `(m + n)`-node graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Node {
    Item(ItemId),
    Account(AccountId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    ItemsOfAccount,
    Predecessors,
    AccountsOfItem,
}

pub fn build_graph(d: &Dataset) -> Result<SequentialGraph> {
    let (m, n) = (d.n_items(), d.n_accounts());
    let mut predecessors = vec![Vec::new(); m];
    let mut successors = vec![Vec::new(); m];
    let mut items_of_account = vec![Vec::new(); n];
    let mut accounts_of_item = vec![Vec::new(); m];
    let mut any = false;
    for seq in d.train() {
        any = true;
        let k = seq.account.0;
        if k >= n {
            return Err(Error::Index {
                what: "account",
                index: k,
                len: n,
            });
        }
        for (pos, item) in seq.items.iter().enumerate() {
            if item.0 >= m {
                return Err(Error::Index {
                    what: "item",
                    index: item.0,
                    len: m,
                });
            }
            items_of_account[k].push(item.0);
            accounts_of_item[item.0].push(k);
            if pos > 0 {
                let prev = seq.items[pos - 1].0;
                predecessors[item.0].push(prev);
                successors[prev].push(item.0);
            }
        }
    }
    if !any {
        return Err(Error::Graph("training split is empty".into()));
    }
    for lists in [
        &mut predecessors,
        &mut successors,
        &mut items_of_account,
        &mut accounts_of_item,
    ] {
        for l in lists.iter_mut() {
            l.sort_unstable();
            l.dedup();
        }
    }
    Ok(SequentialGraph {
        n_items: m,
        n_accounts: n,
        predecessors,
        successors,
        items_of_account,
        accounts_of_item,
    })
}

impl SequentialGraph {
    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_accounts(&self) -> usize {
        self.n_accounts
    }

    /// `M_S[i][j]`: item `j` immediately precedes item `i`.
    pub fn sequential(&self, i: ItemId, j: ItemId) -> bool {
        self.predecessors
            .get(i.0)
            .is_some_and(|p| p.binary_search(&j.0).is_ok())
    }

    /// `M_I[l][k]`: account `k` interacted with item `l`.
    pub fn interaction(&self, l: ItemId, k: AccountId) -> bool {
        self.accounts_of_item
            .get(l.0)
            .is_some_and(|a| a.binary_search(&k.0).is_ok())
    }

    /// Entry `(r, c)` of the composite block adjacency
    /// `[[M_S, M_I], [M_Iᵀ, 0]]`; items occupy indices `0..m`, accounts `m..m+n`.
    pub fn composite(&self, r: usize, c: usize) -> bool {
        let m = self.n_items;
        match (r < m, c < m) {
            (true, true) => self.sequential(ItemId(r), ItemId(c)),
            (true, false) => self.interaction(ItemId(r), AccountId(c - m)),
            (false, true) => self.interaction(ItemId(c), AccountId(r - m)),
            (false, false) => false,
        }
    }

    pub fn neighbors(&self, node: Node, relation: Relation) -> Result<&[usize]> {
        match (node, relation) {
            (Node::Account(k), Relation::ItemsOfAccount) => self
                .items_of_account
                .get(k.0)
                .map(Vec::as_slice)
                .ok_or(Error::Index {
                    what: "account",
                    index: k.0,
                    len: self.n_accounts,
                }),
            (Node::Item(i), Relation::Predecessors) => {
                self.predecessors.get(i.0).map(Vec::as_slice).ok_or(Error::Index {
                    what: "item",
                    index: i.0,
                    len: self.n_items,
                })
            }
            (Node::Item(i), Relation::AccountsOfItem) => {
                self.accounts_of_item.get(i.0).map(Vec::as_slice).ok_or(Error::Index {
                    what: "item",
                    index: i.0,
                    len: self.n_items,
                })
            }
            (node, relation) => Err(Error::Contract(format!(
                "relation {relation:?} is not defined for {node:?}"
            ))),
        }
    }

    pub fn items_of_account(&self, k: usize) -> &[usize] {
        &self.items_of_account[k]
    }

    pub fn predecessors(&self, i: usize) -> &[usize] {
        &self.predecessors[i]
    }

    pub fn successors(&self, i: usize) -> &[usize] {
        &self.successors[i]
    }

    pub fn accounts_of_item(&self, i: usize) -> &[usize] {
        &self.accounts_of_item[i]
    }

    pub fn sequential_edge_count(&self) -> usize {
        self.predecessors.iter().map(Vec::len).sum()
    }

    pub fn interaction_edge_count(&self) -> usize {
        self.items_of_account.iter().map(Vec::len).sum()
    }

    /// Edge list `src dst relation`, one edge per line.
    pub fn write_edge_list(&self, d: &Dataset, mut out: impl Write) -> Result<()> {
        for (i, preds) in self.predecessors.iter().enumerate() {
            for &j in preds {
                writeln!(out, "{}\t{}\tprecedes", d.item_tokens[j], d.item_tokens[i])?;
            }
        }
        for (k, items) in self.items_of_account.iter().enumerate() {
            for &l in items {
                writeln!(out, "{}\t{}\tinteracts", d.account_tokens[k], d.item_tokens[l])?;
            }
        }
        Ok(())
    }
}
