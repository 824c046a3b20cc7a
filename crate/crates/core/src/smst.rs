//! Sparse Merkle sum trie.
//!
//! Leaves sit at the shallowest depth where their subtree holds no other
//! leaf, so a trie of `n` random keys has `O(log n)` depth regardless of the
//! key width. Empty subtrees are represented by [`SumHash::EMPTY`]. Nodes are
//! content-addressed in a [`NodeStore`]; replaced nodes are dropped on write.
//!
//! Hashing:
//!
//! ```text
//! leaf  = H(0x00 || key || value_hash || weight_be64)
//! inner = H(0x01 || left.hash || left.sum_be64 || right.hash || right.sum_be64)
//! value_hash = H(0x02 || value)
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::primitives::{hash_parts, Digest};

const LEAF_TAG: u8 = 0x00;
const INNER_TAG: u8 = 0x01;
const VALUE_TAG: u8 = 0x02;

pub const MAX_KEY_BITS: usize = 256;

#[derive(Debug, Error)]
pub enum SmstError {
    #[error("key {0} already present (replay rejected)")]
    Duplicate(Digest),
    #[error("key {0} not found")]
    NotFound(Digest),
    #[error("trie is empty")]
    EmptyTrie,
    #[error("key width {0} outside 1..=256")]
    InvalidKeyWidth(usize),
    #[error("node {0} missing from store")]
    MissingNode(Digest),
    #[error("sum overflow")]
    Overflow,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("imported leaves produce root {computed}, file declares {declared}")]
    RootMismatch { computed: String, declared: String },
    #[error("store i/o: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, SmstError>;

/// A (hash, sum) commitment: a trie root, a child pointer, or a proof sibling.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Default, Serialize, Deserialize)]
pub struct SumHash {
    pub hash: Digest,
    pub sum: u64,
}

impl SumHash {
    pub const EMPTY: SumHash = SumHash { hash: Digest::ZERO, sum: 0 };

    pub fn is_empty(&self) -> bool {
        *self == Self::EMPTY
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Node {
    Leaf { key: Digest, value_hash: Digest, weight: u64 },
    Inner { left: SumHash, right: SumHash },
}

pub fn value_hash(value: &[u8]) -> Digest {
    hash_parts(&[&[VALUE_TAG], value])
}

pub fn leaf_commitment(key: &Digest, value_hash: &Digest, weight: u64) -> SumHash {
    SumHash {
        hash: hash_parts(&[&[LEAF_TAG], &key.0, &value_hash.0, &weight.to_be_bytes()]),
        sum: weight,
    }
}

/// `None` when the sums overflow.
pub fn inner_commitment(left: &SumHash, right: &SumHash) -> Option<SumHash> {
    let sum = left.sum.checked_add(right.sum)?;
    Some(SumHash {
        hash: hash_parts(&[
            &[INNER_TAG],
            &left.hash.0,
            &left.sum.to_be_bytes(),
            &right.hash.0,
            &right.sum.to_be_bytes(),
        ]),
        sum,
    })
}

impl Node {
    fn commitment(&self) -> Option<SumHash> {
        match self {
            Node::Leaf { key, value_hash, weight } => Some(leaf_commitment(key, value_hash, *weight)),
            Node::Inner { left, right } => inner_commitment(left, right),
        }
    }
}

/// Backing key-value engine for trie nodes and leaf values.
pub trait NodeStore {
    fn get_node(&self, hash: &Digest) -> Option<Node>;
    fn put_node(&mut self, hash: Digest, node: Node) -> Result<()>;
    fn remove_node(&mut self, hash: &Digest) -> Result<()>;
    fn get_value(&self, key: &Digest) -> Option<Vec<u8>>;
    fn put_value(&mut self, key: Digest, value: Vec<u8>) -> Result<()>;
    /// Records the current root; called once per successful mutation.
    fn commit_root(&mut self, root: SumHash, key_bits: usize) -> Result<()>;
    fn stored_root(&self) -> Option<(SumHash, usize)>;
}

#[derive(Default, Clone, Debug)]
pub struct MemoryStore {
    nodes: HashMap<Digest, Node>,
    values: HashMap<Digest, Vec<u8>>,
    root: Option<(SumHash, usize)>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

impl NodeStore for MemoryStore {
    fn get_node(&self, hash: &Digest) -> Option<Node> {
        self.nodes.get(hash).cloned()
    }

    fn put_node(&mut self, hash: Digest, node: Node) -> Result<()> {
        self.nodes.insert(hash, node);
        Ok(())
    }

    fn remove_node(&mut self, hash: &Digest) -> Result<()> {
        self.nodes.remove(hash);
        Ok(())
    }

    fn get_value(&self, key: &Digest) -> Option<Vec<u8>> {
        self.values.get(key).cloned()
    }

    fn put_value(&mut self, key: Digest, value: Vec<u8>) -> Result<()> {
        self.values.insert(key, value);
        Ok(())
    }

    fn commit_root(&mut self, root: SumHash, key_bits: usize) -> Result<()> {
        self.root = Some((root, key_bits));
        Ok(())
    }

    fn stored_root(&self) -> Option<(SumHash, usize)> {
        self.root
    }
}

/// Append-only log file replayed into memory on open.
///
/// Record lines:
/// `L <hash> <key> <value_hash> <weight>`, `I <hash> <lhash> <lsum> <rhash> <rsum>`,
/// `X <hash>` (node removed), `V <key> <value-hex>`, `R <hash> <sum> <key_bits>`.
pub struct FileStore {
    path: PathBuf,
    mem: MemoryStore,
    log: BufWriter<File>,
}

impl FileStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut mem = MemoryStore::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (i, line) in reader.lines().enumerate() {
                replay_line(&mut mem, &line?).map_err(|msg| SmstError::Parse { line: i + 1, msg })?;
            }
        }
        let log = BufWriter::new(OpenOptions::new().create(true).append(true).open(&path)?);
        Ok(FileStore { path, mem, log })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

fn parse_digest(field: Option<&str>) -> std::result::Result<Digest, String> {
    Digest::from_hex(field.ok_or("missing field")?).map_err(|e| e.to_string())
}

fn parse_u64(field: Option<&str>) -> std::result::Result<u64, String> {
    field.ok_or("missing field")?.parse().map_err(|e| format!("{e}"))
}

fn replay_line(mem: &mut MemoryStore, line: &str) -> std::result::Result<(), String> {
    let mut f = line.split_whitespace();
    match f.next() {
        None => Ok(()),
        Some("L") => {
            let hash = parse_digest(f.next())?;
            let node = Node::Leaf {
                key: parse_digest(f.next())?,
                value_hash: parse_digest(f.next())?,
                weight: parse_u64(f.next())?,
            };
            mem.nodes.insert(hash, node);
            Ok(())
        }
        Some("I") => {
            let hash = parse_digest(f.next())?;
            let left = SumHash { hash: parse_digest(f.next())?, sum: parse_u64(f.next())? };
            let right = SumHash { hash: parse_digest(f.next())?, sum: parse_u64(f.next())? };
            mem.nodes.insert(hash, Node::Inner { left, right });
            Ok(())
        }
        Some("X") => {
            mem.nodes.remove(&parse_digest(f.next())?);
            Ok(())
        }
        Some("V") => {
            let key = parse_digest(f.next())?;
            let value = hex::decode(f.next().unwrap_or("")).map_err(|e| e.to_string())?;
            mem.values.insert(key, value);
            Ok(())
        }
        Some("R") => {
            let hash = parse_digest(f.next())?;
            let sum = parse_u64(f.next())?;
            let bits = parse_u64(f.next())? as usize;
            mem.root = Some((SumHash { hash, sum }, bits));
            Ok(())
        }
        Some(other) => Err(format!("unknown record type {other:?}")),
    }
}

impl NodeStore for FileStore {
    fn get_node(&self, hash: &Digest) -> Option<Node> {
        self.mem.get_node(hash)
    }

    fn put_node(&mut self, hash: Digest, node: Node) -> Result<()> {
        match &node {
            Node::Leaf { key, value_hash, weight } => {
                writeln!(self.log, "L {hash} {key} {value_hash} {weight}")?
            }
            Node::Inner { left, right } => writeln!(
                self.log,
                "I {hash} {} {} {} {}",
                left.hash, left.sum, right.hash, right.sum
            )?,
        }
        self.mem.put_node(hash, node)
    }

    fn remove_node(&mut self, hash: &Digest) -> Result<()> {
        writeln!(self.log, "X {hash}")?;
        self.mem.remove_node(hash)
    }

    fn get_value(&self, key: &Digest) -> Option<Vec<u8>> {
        self.mem.get_value(key)
    }

    fn put_value(&mut self, key: Digest, value: Vec<u8>) -> Result<()> {
        writeln!(self.log, "V {key} {}", hex::encode(&value))?;
        self.mem.put_value(key, value)
    }

    fn commit_root(&mut self, root: SumHash, key_bits: usize) -> Result<()> {
        writeln!(self.log, "R {} {} {key_bits}", root.hash, root.sum)?;
        self.log.flush()?;
        self.mem.commit_root(root, key_bits)
    }

    fn stored_root(&self) -> Option<(SumHash, usize)> {
        self.mem.stored_root()
    }
}

/// Membership proof: the leaf plus its siblings ordered from the leaf up to
/// the root. The leaf's depth equals `siblings.len()`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipProof {
    pub key: Digest,
    pub value_hash: Digest,
    pub weight: u64,
    pub siblings: Vec<SumHash>,
}

impl MembershipProof {
    /// Recomputes the root this proof commits to.
    pub fn compute_root(&self) -> Option<SumHash> {
        let depth = self.siblings.len();
        if depth > MAX_KEY_BITS {
            return None;
        }
        let mut acc = leaf_commitment(&self.key, &self.value_hash, self.weight);
        for (i, sibling) in self.siblings.iter().enumerate() {
            let level = depth - 1 - i;
            acc = if self.key.bit(level) {
                inner_commitment(sibling, &acc)?
            } else {
                inner_commitment(&acc, sibling)?
            };
        }
        Some(acc)
    }

    /// Whether descending along `target` (taking the sibling branch wherever
    /// the indicated subtree is empty) ends at this proof's leaf.
    ///
    /// Only the proof itself is needed: at every depth either the leaf's path
    /// agrees with the target bit or the branch the target points at is empty.
    pub fn follows_closest_path(&self, target: &Digest) -> bool {
        let depth = self.siblings.len();
        (0..depth).all(|level| {
            let sibling = &self.siblings[depth - 1 - level];
            self.key.bit(level) == target.bit(level) || sibling.is_empty()
        })
    }

    /// Line-oriented text form used by the CLI proof files.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "key {}", self.key);
        let _ = writeln!(out, "value_hash {}", self.value_hash);
        let _ = writeln!(out, "weight {}", self.weight);
        for s in &self.siblings {
            let _ = writeln!(out, "sibling {} {}", s.hash, s.sum);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut key = None;
        let mut value_hash = None;
        let mut weight = None;
        let mut siblings = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let err = |msg: String| SmstError::Parse { line: i + 1, msg };
            let mut f = line.split_whitespace();
            match f.next() {
                None => {}
                Some("key") => key = Some(parse_digest(f.next()).map_err(err)?),
                Some("value_hash") => value_hash = Some(parse_digest(f.next()).map_err(err)?),
                Some("weight") => weight = Some(parse_u64(f.next()).map_err(err)?),
                Some("sibling") => {
                    let hash = parse_digest(f.next()).map_err(err)?;
                    let sum = parse_u64(f.next()).map_err(err)?;
                    siblings.push(SumHash { hash, sum });
                }
                Some(other) => return Err(err(format!("unknown field {other:?}"))),
            }
        }
        let missing = |name: &str| SmstError::Parse { line: 0, msg: format!("missing {name}") };
        Ok(MembershipProof {
            key: key.ok_or_else(|| missing("key"))?,
            value_hash: value_hash.ok_or_else(|| missing("value_hash"))?,
            weight: weight.ok_or_else(|| missing("weight"))?,
            siblings,
        })
    }
}

/// True iff the proof recomputes exactly `root` (hash and sum).
pub fn verify_proof(root: &SumHash, proof: &MembershipProof) -> bool {
    proof.compute_root().is_some_and(|r| r == *root)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LeafRecord {
    pub key: Digest,
    pub value_hash: Digest,
    pub weight: u64,
}

pub struct SumTrie<S: NodeStore = MemoryStore> {
    store: S,
    root: SumHash,
    key_bits: usize,
}

impl SumTrie<MemoryStore> {
    pub fn new(key_bits: usize) -> Result<Self> {
        Self::with_store(MemoryStore::new(), key_bits)
    }
}

impl<S: NodeStore> SumTrie<S> {
    /// Opens a trie over `store`, resuming from its last committed root.
    pub fn with_store(store: S, key_bits: usize) -> Result<Self> {
        if !(1..=MAX_KEY_BITS).contains(&key_bits) {
            return Err(SmstError::InvalidKeyWidth(key_bits));
        }
        let root = match store.stored_root() {
            Some((root, bits)) if bits == key_bits => root,
            Some((_, bits)) => return Err(SmstError::InvalidKeyWidth(bits)),
            None => SumHash::EMPTY,
        };
        Ok(SumTrie { store, root, key_bits })
    }

    pub fn root(&self) -> SumHash {
        self.root
    }

    pub fn key_bits(&self) -> usize {
        self.key_bits
    }

    pub fn is_empty(&self) -> bool {
        self.root.is_empty()
    }

    pub fn store(&self) -> &S {
        &self.store
    }

    /// Canonical form of `key` under this trie's width.
    pub fn normalize(&self, key: &Digest) -> Digest {
        key.masked(self.key_bits)
    }

    /// Inserts a unit-weight leaf holding `value`.
    pub fn insert(&mut self, key: &Digest, value: &[u8]) -> Result<SumHash> {
        let key = self.normalize(key);
        let vh = value_hash(value);
        self.insert_leaf(key, vh, 1)?;
        self.store.put_value(key, value.to_vec())?;
        self.store.commit_root(self.root, self.key_bits)?;
        Ok(self.root)
    }

    /// Inserts a leaf when only the value hash is known (imports, fixtures).
    pub fn insert_hashed(&mut self, key: &Digest, value_hash: Digest, weight: u64) -> Result<SumHash> {
        let key = self.normalize(key);
        self.insert_leaf(key, value_hash, weight)?;
        self.store.commit_root(self.root, self.key_bits)?;
        Ok(self.root)
    }

    fn insert_leaf(&mut self, key: Digest, value_hash: Digest, weight: u64) -> Result<()> {
        if self.contains(&key)? {
            return Err(SmstError::Duplicate(key));
        }
        let leaf = Node::Leaf { key, value_hash, weight };
        self.root = self.insert_at(self.root, 0, key, leaf)?;
        Ok(())
    }

    fn load(&self, hash: &Digest) -> Result<Node> {
        self.store.get_node(hash).ok_or(SmstError::MissingNode(*hash))
    }

    fn put(&mut self, node: Node) -> Result<SumHash> {
        let commitment = node.commitment().ok_or(SmstError::Overflow)?;
        self.store.put_node(commitment.hash, node)?;
        Ok(commitment)
    }

    fn insert_at(&mut self, at: SumHash, depth: usize, key: Digest, leaf: Node) -> Result<SumHash> {
        if at.is_empty() {
            return self.put(leaf);
        }
        match self.load(&at.hash)? {
            Node::Leaf { key: existing, .. } => {
                let new_leaf = self.put(leaf)?;
                self.join(depth, (at, existing), (new_leaf, key))
            }
            Node::Inner { left, right } => {
                let (left, right) = if key.bit(depth) {
                    (left, self.insert_at(right, depth + 1, key, leaf)?)
                } else {
                    (self.insert_at(left, depth + 1, key, leaf)?, right)
                };
                self.store.remove_node(&at.hash)?;
                self.put(Node::Inner { left, right })
            }
        }
    }

    /// Builds the smallest subtree at `depth` holding two distinct leaves.
    fn join(&mut self, depth: usize, a: (SumHash, Digest), b: (SumHash, Digest)) -> Result<SumHash> {
        if depth >= self.key_bits {
            // Distinct masked keys always differ before the width runs out.
            return Err(SmstError::Duplicate(a.1));
        }
        let (bit_a, bit_b) = (a.1.bit(depth), b.1.bit(depth));
        let (left, right) = if bit_a == bit_b {
            let child = self.join(depth + 1, a, b)?;
            if bit_a {
                (SumHash::EMPTY, child)
            } else {
                (child, SumHash::EMPTY)
            }
        } else if bit_a {
            (b.0, a.0)
        } else {
            (a.0, b.0)
        };
        self.put(Node::Inner { left, right })
    }

    pub fn contains(&self, key: &Digest) -> Result<bool> {
        let key = self.normalize(key);
        let mut at = self.root;
        let mut depth = 0;
        loop {
            if at.is_empty() {
                return Ok(false);
            }
            match self.load(&at.hash)? {
                Node::Leaf { key: k, .. } => return Ok(k == key),
                Node::Inner { left, right } => {
                    at = if key.bit(depth) { right } else { left };
                    depth += 1;
                }
            }
        }
    }

    pub fn get_value(&self, key: &Digest) -> Option<Vec<u8>> {
        self.store.get_value(&self.normalize(key))
    }

    pub fn prove_membership(&self, key: &Digest) -> Result<MembershipProof> {
        let key = self.normalize(key);
        let proof = self.descend(|depth, _, _| key.bit(depth))?;
        match proof {
            Some(p) if p.key == key => Ok(p),
            _ => Err(SmstError::NotFound(key)),
        }
    }

    /// Proof of the leaf reached by following `target` from the root,
    /// switching to the sibling branch whenever the indicated one is empty.
    pub fn closest_proof(&self, target: &Digest) -> Result<MembershipProof> {
        if self.is_empty() {
            return Err(SmstError::EmptyTrie);
        }
        let target = self.normalize(target);
        self.descend(|depth, left, right| {
            let want_right = target.bit(depth);
            if want_right {
                !right.is_empty() || left.is_empty()
            } else {
                left.is_empty() && !right.is_empty()
            }
        })?
        .ok_or(SmstError::EmptyTrie)
    }

    /// Walks from the root, `go_right(depth, left, right)` choosing the
    /// branch at each inner node, and returns the proof for the leaf reached.
    fn descend<F>(&self, mut go_right: F) -> Result<Option<MembershipProof>>
    where
        F: FnMut(usize, &SumHash, &SumHash) -> bool,
    {
        let mut siblings = Vec::new();
        let mut at = self.root;
        let mut depth = 0;
        loop {
            if at.is_empty() {
                return Ok(None);
            }
            match self.load(&at.hash)? {
                Node::Leaf { key, value_hash, weight } => {
                    siblings.reverse();
                    return Ok(Some(MembershipProof { key, value_hash, weight, siblings }));
                }
                Node::Inner { left, right } => {
                    if go_right(depth, &left, &right) {
                        siblings.push(left);
                        at = right;
                    } else {
                        siblings.push(right);
                        at = left;
                    }
                    depth += 1;
                }
            }
        }
    }

    /// All leaves in key order.
    pub fn leaves(&self) -> Result<Vec<LeafRecord>> {
        let mut out = Vec::new();
        let mut stack = vec![self.root];
        while let Some(at) = stack.pop() {
            if at.is_empty() {
                continue;
            }
            match self.load(&at.hash)? {
                Node::Leaf { key, value_hash, weight } => out.push(LeafRecord { key, value_hash, weight }),
                Node::Inner { left, right } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        Ok(out)
    }

    /// Flat export: a header, the root line, then one record per leaf in key
    /// order. Keys are written as `key_bits`-wide path hex.
    pub fn export(&self) -> Result<String> {
        let mut out = String::new();
        let _ = writeln!(out, "# smst-export v1 key_bits={}", self.key_bits);
        let _ = writeln!(out, "root {} {}", self.root.hash, self.root.sum);
        for leaf in self.leaves()? {
            let _ = writeln!(
                out,
                "{} {} {}",
                path_to_hex(&leaf.key, self.key_bits),
                leaf.value_hash,
                leaf.weight
            );
        }
        Ok(out)
    }
}

/// Rebuilds an in-memory trie from [`SumTrie::export`] output and checks the
/// declared root.
pub fn import(text: &str) -> Result<SumTrie<MemoryStore>> {
    let mut lines = text.lines().enumerate();
    let parse_err = |line: usize, msg: &str| SmstError::Parse { line: line + 1, msg: msg.to_string() };
    let (i, header) = lines.next().ok_or_else(|| parse_err(0, "empty export"))?;
    let key_bits: usize = header
        .strip_prefix("# smst-export v1 key_bits=")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| parse_err(i, "bad header"))?;
    let mut trie = SumTrie::new(key_bits)?;
    let (i, root_line) = lines.next().ok_or_else(|| parse_err(1, "missing root line"))?;
    let mut f = root_line.split_whitespace();
    if f.next() != Some("root") {
        return Err(parse_err(i, "expected root line"));
    }
    let declared = SumHash {
        hash: parse_digest(f.next()).map_err(|m| parse_err(i, &m))?,
        sum: parse_u64(f.next()).map_err(|m| parse_err(i, &m))?,
    };
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut f = line.split_whitespace();
        let key = path_from_hex(f.next().unwrap_or(""), key_bits).map_err(|m| parse_err(i, &m))?;
        let vh = parse_digest(f.next()).map_err(|m| parse_err(i, &m))?;
        let weight = parse_u64(f.next()).map_err(|m| parse_err(i, &m))?;
        trie.insert_hashed(&key, vh, weight)?;
    }
    if trie.root() != declared {
        return Err(SmstError::RootMismatch {
            computed: format!("{} {}", trie.root().hash, trie.root().sum),
            declared: format!("{} {}", declared.hash, declared.sum),
        });
    }
    Ok(trie)
}

/// The top `bits` bits of `key` as a right-aligned hex integer, zero-padded
/// to `ceil(bits / 4)` digits.
pub fn path_to_hex(key: &Digest, bits: usize) -> String {
    let value = BigUint::from_bytes_be(&key.0) >> (MAX_KEY_BITS - bits);
    let width = bits.div_ceil(4);
    format!("{:0>width$}", value.to_str_radix(16))
}

/// Inverse of [`path_to_hex`]; rejects values that do not fit in `bits`.
pub fn path_from_hex(s: &str, bits: usize) -> std::result::Result<Digest, String> {
    if !(1..=MAX_KEY_BITS).contains(&bits) {
        return Err(format!("key width {bits} outside 1..=256"));
    }
    let s = s.trim();
    let s = s.strip_prefix("0x").unwrap_or(s);
    let value = BigUint::parse_bytes(s.as_bytes(), 16).ok_or_else(|| format!("invalid hex path {s:?}"))?;
    if value.bits() as usize > bits {
        return Err(format!("path {s} does not fit in {bits} bits"));
    }
    let shifted = value << (MAX_KEY_BITS - bits);
    let raw = shifted.to_bytes_be();
    let mut out = [0u8; 32];
    if shifted != BigUint::ZERO {
        out[32 - raw.len()..].copy_from_slice(&raw);
    }
    Ok(Digest(out))
}
