// SPDX-License-Identifier: Apache-2.0

//! Token-level radix tree.
//!
//! Each non-root node owns an edge of tokens and a value describing who holds
//! the tokens of the path ending at that node. Edges are split internally on
//! insert; callers only ever see token-exact match lengths.

use std::collections::BTreeMap;

use crate::toymodel::Token;

pub type NodeId = usize;

const ROOT: NodeId = 0;

#[derive(Debug, Clone)]
struct Node<T> {
    edge: Vec<Token>,
    start: usize,
    parent: Option<NodeId>,
    children: BTreeMap<Token, NodeId>,
    value: Option<T>,
    last_access: u64,
    pinned: bool,
}

impl<T> Node<T> {
    fn end(&self) -> usize {
        self.start + self.edge.len()
    }
}

/// Result of a prefix lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefixMatch {
    pub len: usize,
    /// Deepest node touched by the match, if any token matched.
    pub node: Option<NodeId>,
}

/// Outcome of [`RadixTree::insert`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inserted<T> {
    pub matched: usize,
    pub leaf: Option<NodeId>,
    /// Values cloned into new upper halves of split nodes.
    pub split_values: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct RadixTree<T> {
    nodes: Vec<Option<Node<T>>>,
    free: Vec<NodeId>,
    tick: u64,
    count: usize,
}

impl<T: Clone> Default for RadixTree<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Clone> RadixTree<T> {
    pub fn new() -> Self {
        let root = Node {
            edge: Vec::new(),
            start: 0,
            parent: None,
            children: BTreeMap::new(),
            value: None,
            last_access: 0,
            pinned: false,
        };
        Self {
            nodes: vec![Some(root)],
            free: Vec::new(),
            tick: 0,
            count: 0,
        }
    }

    fn node(&self, id: NodeId) -> &Node<T> {
        self.nodes[id].as_ref().expect("live node")
    }

    fn node_mut(&mut self, id: NodeId) -> &mut Node<T> {
        self.nodes[id].as_mut().expect("live node")
    }

    /// Number of non-root nodes.
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Walks the tree; returns the match and the visited node ids.
    fn walk(&self, tokens: &[Token]) -> (usize, Vec<NodeId>) {
        let mut pos = 0;
        let mut cur = ROOT;
        let mut path = Vec::new();
        while pos < tokens.len() {
            let Some(&child) = self.node(cur).children.get(&tokens[pos]) else {
                break;
            };
            let edge = &self.node(child).edge;
            let common = edge
                .iter()
                .zip(&tokens[pos..])
                .take_while(|(a, b)| a == b)
                .count();
            path.push(child);
            pos += common;
            if common < edge.len() {
                break;
            }
            cur = child;
        }
        (pos, path)
    }

    /// Match length and the nodes visited by it, without touching LRU state.
    pub fn path(&self, tokens: &[Token]) -> (usize, Vec<NodeId>) {
        self.walk(tokens)
    }

    /// Longest cached prefix; refreshes LRU stamps along the path.
    pub fn match_prefix(&mut self, tokens: &[Token]) -> PrefixMatch {
        let (len, path) = self.walk(tokens);
        self.tick += 1;
        let tick = self.tick;
        for &id in &path {
            self.node_mut(id).last_access = tick;
        }
        PrefixMatch {
            len,
            node: path.last().copied(),
        }
    }

    /// Same as [`match_prefix`](Self::match_prefix) without touching LRU state.
    pub fn peek(&self, tokens: &[Token]) -> PrefixMatch {
        let (len, path) = self.walk(tokens);
        PrefixMatch {
            len,
            node: path.last().copied(),
        }
    }

    /// Splits `id` so that its edge ends after `keep` tokens; returns the new
    /// upper node, which inherits a clone of the value.
    fn split(&mut self, id: NodeId, keep: usize) -> NodeId {
        let (parent, start, upper_edge, lower_first, value, access, pinned) = {
            let n = self.node_mut(id);
            let upper_edge: Vec<Token> = n.edge.drain(..keep).collect();
            let old_start = n.start;
            n.start += keep;
            (
                n.parent.expect("non-root"),
                old_start,
                upper_edge,
                n.edge[0],
                n.value.clone(),
                n.last_access,
                n.pinned,
            )
        };
        let first = upper_edge[0];
        let upper = self.alloc(Node {
            edge: upper_edge,
            start,
            parent: Some(parent),
            children: BTreeMap::from([(lower_first, id)]),
            value,
            last_access: access,
            pinned,
        });
        self.node_mut(id).parent = Some(upper);
        self.node_mut(parent).children.insert(first, upper);
        upper
    }

    fn alloc(&mut self, node: Node<T>) -> NodeId {
        self.count += 1;
        if let Some(id) = self.free.pop() {
            self.nodes[id] = Some(node);
            id
        } else {
            self.nodes.push(Some(node));
            self.nodes.len() - 1
        }
    }

    /// Inserts `tokens` with `value` attached to the new leaf covering the
    /// unmatched suffix. A fully present sequence inserts nothing.
    pub fn insert(&mut self, tokens: &[Token], value: T) -> Inserted<T> {
        self.tick += 1;
        let tick = self.tick;
        let mut pos = 0;
        let mut cur = ROOT;
        let mut split_values = Vec::new();
        while pos < tokens.len() {
            let Some(&child) = self.node(cur).children.get(&tokens[pos]) else {
                break;
            };
            let edge_len = self.node(child).edge.len();
            let common = self
                .node(child)
                .edge
                .iter()
                .zip(&tokens[pos..])
                .take_while(|(a, b)| a == b)
                .count();
            self.node_mut(child).last_access = tick;
            pos += common;
            if common < edge_len {
                if pos == tokens.len() {
                    return Inserted {
                        matched: pos,
                        leaf: None,
                        split_values,
                    };
                }
                let upper = self.split(child, common);
                if let Some(v) = self.node(upper).value.clone() {
                    split_values.push(v);
                }
                cur = upper;
                break;
            }
            cur = child;
        }
        if pos == tokens.len() {
            return Inserted {
                matched: pos,
                leaf: None,
                split_values,
            };
        }
        let leaf = self.alloc(Node {
            edge: tokens[pos..].to_vec(),
            start: pos,
            parent: Some(cur),
            children: BTreeMap::new(),
            value: Some(value),
            last_access: tick,
            pinned: false,
        });
        self.node_mut(cur).children.insert(tokens[pos], leaf);
        Inserted {
            matched: pos,
            leaf: Some(leaf),
            split_values,
        }
    }

    /// Sets the pin flag on every node covering `prefix`, splitting the last
    /// node at the prefix boundary. Returns the nodes touched and any values
    /// cloned by the split.
    pub fn set_pinned(&mut self, prefix: &[Token], flag: bool) -> (usize, Vec<T>) {
        let (len, path) = self.walk(prefix);
        let mut cloned = Vec::new();
        let mut path = path;
        if let Some(&last) = path.last() {
            if self.node(last).end() > len {
                let keep = len - self.node(last).start;
                if keep == 0 {
                    path.pop();
                } else {
                    let upper = self.split(last, keep);
                    if let Some(v) = self.node(upper).value.clone() {
                        cloned.push(v);
                    }
                    *path.last_mut().unwrap() = upper;
                }
            }
        }
        for &id in &path {
            self.node_mut(id).pinned = flag;
        }
        (path.len(), cloned)
    }

    pub fn is_pinned(&self, id: NodeId) -> bool {
        self.node(id).pinned
    }

    pub fn value(&self, id: NodeId) -> Option<&T> {
        self.node(id).value.as_ref()
    }

    pub fn value_mut(&mut self, id: NodeId) -> Option<&mut T> {
        self.node_mut(id).value.as_mut()
    }

    /// `[start, end)` token positions covered by the node's edge.
    pub fn range(&self, id: NodeId) -> (usize, usize) {
        let n = self.node(id);
        (n.start, n.end())
    }

    /// Full token path from the root to the end of `id`.
    pub fn path_tokens(&self, id: NodeId) -> Vec<Token> {
        let mut parts = Vec::new();
        let mut cur = Some(id);
        while let Some(c) = cur {
            if c == ROOT {
                break;
            }
            let n = self.node(c);
            parts.push(&n.edge[..]);
            cur = n.parent;
        }
        parts.iter().rev().flat_map(|p| p.iter().copied()).collect()
    }

    /// Least recently used unpinned leaf accepted by `evictable`; ties break
    /// by node id.
    pub fn lru_leaf(&self, mut evictable: impl FnMut(NodeId, &T) -> bool) -> Option<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .skip(1)
            .filter_map(|(id, n)| n.as_ref().map(|n| (id, n)))
            .filter(|(_, n)| n.children.is_empty() && !n.pinned)
            .filter(|(id, n)| n.value.as_ref().is_some_and(|v| evictable(*id, v)))
            .min_by_key(|(id, n)| (n.last_access, *id))
            .map(|(id, _)| id)
    }

    /// Removes a leaf and returns its value.
    pub fn remove_leaf(&mut self, id: NodeId) -> Option<T> {
        assert_ne!(id, ROOT);
        let node = self.nodes[id].take().expect("live node");
        assert!(node.children.is_empty(), "only leaves can be removed");
        if let Some(p) = node.parent {
            self.node_mut(p).children.remove(&node.edge[0]);
        }
        self.free.push(id);
        self.count -= 1;
        node.value
    }

    /// Ids of all live non-root nodes, in id order.
    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, n)| n.is_some())
            .map(|(i, _)| i)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lcp(a: &[Token], b: &[Token]) -> usize {
        a.iter().zip(b).take_while(|(x, y)| x == y).count()
    }

    #[test]
    fn basic_matching() {
        let mut t: RadixTree<u32> = RadixTree::new();
        assert_eq!(t.match_prefix(&[1, 2, 3]).len, 0);
        t.insert(&[5, 6, 7, 8], 1);
        assert_eq!(t.match_prefix(&[5, 6, 9]).len, 2);
        t.insert(&[1, 2, 3], 2);
        assert_eq!(t.match_prefix(&[1, 2, 3]).len, 3);
    }

    #[test]
    fn split_clones_value() {
        let mut t: RadixTree<u32> = RadixTree::new();
        t.insert(&[1, 2, 3, 4], 7);
        let ins = t.insert(&[1, 2, 9], 8);
        assert_eq!(ins.matched, 2);
        assert_eq!(ins.split_values, vec![7]);
        assert_eq!(t.len(), 3);
        let m = t.match_prefix(&[1, 2, 3, 4, 5]);
        assert_eq!(m.len, 4);
        assert_eq!(t.value(m.node.unwrap()), Some(&7));
        assert_eq!(t.path_tokens(m.node.unwrap()), vec![1, 2, 3, 4]);
    }

    #[test]
    fn duplicate_insert_is_noop() {
        let mut t: RadixTree<u32> = RadixTree::new();
        t.insert(&[1, 2, 3], 1);
        let ins = t.insert(&[1, 2], 2);
        assert_eq!(ins.leaf, None);
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn lru_and_pins() {
        let mut t: RadixTree<u32> = RadixTree::new();
        t.insert(&[1, 1], 1);
        t.insert(&[2, 2], 2);
        t.match_prefix(&[1, 1]);
        let lru = t.lru_leaf(|_, _| true).unwrap();
        assert_eq!(t.value(lru), Some(&2));
        t.set_pinned(&[2, 2], true);
        let lru = t.lru_leaf(|_, _| true).unwrap();
        assert_eq!(t.value(lru), Some(&1));
        t.set_pinned(&[1, 1], true);
        assert!(t.lru_leaf(|_, _| true).is_none());
    }

    #[test]
    fn pin_splits_partial_node() {
        let mut t: RadixTree<u32> = RadixTree::new();
        t.insert(&[1, 2, 3, 4], 1);
        let (n, cloned) = t.set_pinned(&[1, 2], true);
        assert_eq!(n, 1);
        assert_eq!(cloned, vec![1]);
        // The unpinned lower half remains evictable.
        let leaf = t.lru_leaf(|_, _| true).unwrap();
        assert_eq!(t.range(leaf), (2, 4));
        t.remove_leaf(leaf);
        assert_eq!(t.match_prefix(&[1, 2, 3, 4]).len, 2);
        assert!(t.lru_leaf(|_, _| true).is_none());
    }

    proptest! {
        #[test]
        fn match_equals_brute_force_lcp(
            seqs in prop::collection::vec(prop::collection::vec(0u32..4, 1..12), 0..12),
            query in prop::collection::vec(0u32..4, 1..12),
        ) {
            let mut t: RadixTree<usize> = RadixTree::new();
            for (i, s) in seqs.iter().enumerate() {
                t.insert(s, i);
            }
            let expect = seqs.iter().map(|s| lcp(s, &query)).max().unwrap_or(0);
            let m = t.match_prefix(&query);
            prop_assert_eq!(m.len, expect);
            if let Some(node) = m.node {
                // The deepest node's path contains the matched prefix.
                let path = t.path_tokens(node);
                prop_assert!(path.len() >= m.len);
                prop_assert_eq!(&path[..m.len], &query[..m.len]);
                // Its value names an inserted sequence sharing the match.
                let v = *t.value(node).unwrap();
                prop_assert!(lcp(&seqs[v], &query) >= m.len);
            }
        }
    }
}
