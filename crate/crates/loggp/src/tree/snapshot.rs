//! Self-describing binary snapshots of trees and vector predictors.
//!
//! The format is documented in the guide (`book/src/cli-and-formats.md`).
//! In short, little-endian throughout:
//!
//! ```text
//! file   := magic "LGGPSNAP" | version u32 | d u32 | tree{d}
//! tree   := rho u32 | n_bar u32 | overlap_ratio f64 | adapt u8 | freeze u8
//!         | rprop f64{5} | init_hyper f64{rho+2}
//!         | rng_seed u8{32} | rng_stream u64 | rng_word_pos u128
//!         | total u64 | dropped u64 | grad_skips u64 | node_count u32
//!         | node (preorder: routing is followed by its left then right subtree)
//! node   := 0u8 | split_dim u32 | split_value f64 | overlap f64   (routing)
//!         | 1u8 | theta_log f64{rho+2} | step f64{rho+2} | sign i8{rho+2}
//!         |       model_hyper f64{rho+2} | jitter f64 | n u32
//!         |       (x f64{rho} | y f64){n}                          (leaf)
//! ```
//!
//! Kernel factorizations are not stored; they are rebuilt on load, which
//! reproduces the in-memory factors exactly because batch factorization and
//! sequential insertion share one arithmetic path. Snapshot stability across
//! crate versions is not promised.

use super::{HyperState, LeafNode, LogGpTree, Node, RpropConfig, Split, TreeConfig, VectorPredictor};
use crate::gp::{Dataset, FactorizedModel, Hyperparameters};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"LGGPSNAP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a tree snapshot (bad magic)")]
    BadMagic,
    #[error("unsupported snapshot version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt snapshot: {0}")]
    Corrupt(String),
}

fn corrupt(msg: &str) -> SnapshotError {
    SnapshotError::Corrupt(msg.to_string())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SnapshotError> {
        if self.pos + n > self.buf.len() {
            return Err(corrupt("unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, SnapshotError> {
        Ok(self.take(1)?[0])
    }

    fn i8(&mut self) -> Result<i8, SnapshotError> {
        Ok(self.take(1)?[0] as i8)
    }

    fn u32(&mut self) -> Result<u32, SnapshotError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, SnapshotError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128, SnapshotError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, SnapshotError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, SnapshotError> {
        (0..n).map(|_| self.f64()).collect()
    }
}

fn write_tree(tree: &LogGpTree, out: &mut Vec<u8>) {
    let rho = tree.dim as u32;
    let params = tree.config.init_hyper.n_params();
    out.extend_from_slice(&rho.to_le_bytes());
    out.extend_from_slice(&(tree.config.n_bar as u32).to_le_bytes());
    out.extend_from_slice(&tree.config.overlap_ratio.to_le_bytes());
    out.push(u8::from(tree.config.adapt));
    out.push(u8::from(tree.config.freeze_noise));
    let r = &tree.config.rprop;
    for v in [r.initial_step, r.accel, r.brake, r.min_step, r.max_step] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in tree.config.init_hyper.to_vec() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&tree.rng.get_seed());
    out.extend_from_slice(&tree.rng.get_stream().to_le_bytes());
    out.extend_from_slice(&tree.rng.get_word_pos().to_le_bytes());
    out.extend_from_slice(&tree.total_count.to_le_bytes());
    out.extend_from_slice(&tree.dropped.to_le_bytes());
    out.extend_from_slice(&tree.grad_skips.to_le_bytes());
    out.extend_from_slice(&(tree.nodes.len() as u32).to_le_bytes());
    debug_assert_eq!(params, tree.dim + 2);
    write_node(tree, 0, out);
}

fn write_node(tree: &LogGpTree, id: usize, out: &mut Vec<u8>) {
    match &tree.nodes[id] {
        Node::Routing { split, left, right } => {
            out.push(0);
            out.extend_from_slice(&(split.dim as u32).to_le_bytes());
            out.extend_from_slice(&split.value.to_le_bytes());
            out.extend_from_slice(&split.overlap.to_le_bytes());
            write_node(tree, *left, out);
            write_node(tree, *right, out);
        }
        Node::Leaf(leaf) => {
            out.push(1);
            for v in &leaf.hyper_state.theta_log {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in &leaf.hyper_state.step {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for s in &leaf.hyper_state.prev_sign {
                out.push(*s as u8);
            }
            for v in leaf.model.hyper().to_vec() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&leaf.model.jitter().to_le_bytes());
            out.extend_from_slice(&(leaf.model.len() as u32).to_le_bytes());
            for (x, y) in leaf.model.data().iter() {
                for v in x {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&y.to_le_bytes());
            }
        }
    }
}

fn read_tree(r: &mut Reader) -> Result<LogGpTree, SnapshotError> {
    let rho = r.u32()? as usize;
    if rho == 0 || rho > 1 << 20 {
        return Err(corrupt("implausible input dimension"));
    }
    let n_bar = r.u32()? as usize;
    let overlap_ratio = r.f64()?;
    let adapt = r.u8()? != 0;
    let freeze_noise = r.u8()? != 0;
    let rprop = RpropConfig {
        initial_step: r.f64()?,
        accel: r.f64()?,
        brake: r.f64()?,
        min_step: r.f64()?,
        max_step: r.f64()?,
    };
    let init = r.f64s(rho + 2)?;
    let init_hyper = Hyperparameters::from_vec(&init)
        .map_err(|e| corrupt(&format!("initial hyperparameters: {e}")))?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    let total_count = r.u64()?;
    let dropped = r.u64()?;
    let grad_skips = r.u64()?;
    let node_count = r.u32()? as usize;
    let mut nodes = Vec::with_capacity(node_count);
    read_node(r, &mut nodes, rho, &rprop)?;
    if nodes.len() != node_count {
        return Err(corrupt("node count mismatch"));
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let config = TreeConfig { n_bar, overlap_ratio, init_hyper, adapt, freeze_noise, rprop };
    Ok(LogGpTree { config, dim: rho, nodes, rng, total_count, dropped, grad_skips })
}

fn read_node(
    r: &mut Reader,
    nodes: &mut Vec<Node>,
    rho: usize,
    rprop: &RpropConfig,
) -> Result<usize, SnapshotError> {
    match r.u8()? {
        0 => {
            let dim = r.u32()? as usize;
            if dim >= rho {
                return Err(corrupt("split dimension out of range"));
            }
            let value = r.f64()?;
            let overlap = r.f64()?;
            let id = nodes.len();
            nodes.push(Node::Routing { split: Split { dim, value, overlap }, left: 0, right: 0 });
            let left = read_node(r, nodes, rho, rprop)?;
            let right = read_node(r, nodes, rho, rprop)?;
            match &mut nodes[id] {
                Node::Routing { left: l, right: rt, .. } => {
                    *l = left;
                    *rt = right;
                }
                Node::Leaf(_) => unreachable!(),
            }
            Ok(id)
        }
        1 => {
            let theta_log = r.f64s(rho + 2)?;
            let step = r.f64s(rho + 2)?;
            let prev_sign: Vec<i8> =
                (0..rho + 2).map(|_| r.i8()).collect::<Result<_, _>>()?;
            let hyper_state = HyperState { theta_log, step, prev_sign };
            let model_hyper = Hyperparameters::from_vec(&r.f64s(rho + 2)?)
                .map_err(|e| corrupt(&format!("leaf hyperparameters: {e}")))?;
            let jitter = r.f64()?;
            let n = r.u32()? as usize;
            let mut data = Dataset::new(rho);
            let mut x = vec![0.0; rho];
            for _ in 0..n {
                for v in x.iter_mut() {
                    *v = r.f64()?;
                }
                let y = r.f64()?;
                data.push(&x, y);
            }
            let model = FactorizedModel::fit_with_jitter(data, model_hyper, jitter)
                .map_err(|e| corrupt(&format!("leaf refactorization: {e}")))?;
            let _ = rprop;
            let id = nodes.len();
            nodes.push(Node::Leaf(Box::new(LeafNode { model, hyper_state })));
            Ok(id)
        }
        t => Err(corrupt(&format!("unknown node tag {t}"))),
    }
}

impl LogGpTree {
    /// Encode the tree (with its RNG state) as a single-tree snapshot.
    pub fn snapshot_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&1u32.to_le_bytes());
        write_tree(self, &mut out);
        out
    }

    pub fn from_snapshot_bytes(bytes: &[u8]) -> Result<Self, SnapshotError> {
        let mut trees = decode(bytes)?;
        if trees.len() != 1 {
            return Err(corrupt("expected a single-tree snapshot"));
        }
        Ok(trees.pop().unwrap())
    }

    pub fn save_snapshot<P: AsRef<Path>>(&self, path: P) -> Result<(), SnapshotError> {
        std::fs::write(path, self.snapshot_bytes())?;
        Ok(())
    }

    pub fn load_snapshot<P: AsRef<Path>>(path: P) -> Result<Self, SnapshotError> {
        Self::from_snapshot_bytes(&std::fs::read(path)?)
    }
}

fn decode(bytes: &[u8]) -> Result<Vec<LogGpTree>, SnapshotError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(SnapshotError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(SnapshotError::UnsupportedVersion(version));
    }
    let d = r.u32()? as usize;
    let trees = (0..d).map(|_| read_tree(&mut r)).collect::<Result<Vec<_>, _>>()?;
    if r.pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(trees)
}

impl VectorPredictor {
    pub fn snapshot_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.trees().len() as u32).to_le_bytes());
        for tree in self.trees() {
            write_tree(tree, &mut out);
        }
        out
    }

    pub fn from_snapshot_bytes(bytes: &[u8]) -> Result<Self, SnapshotError> {
        Ok(Self::from_trees(decode(bytes)?))
    }

    pub fn save_snapshot<P: AsRef<Path>>(&self, path: P) -> Result<(), SnapshotError> {
        std::fs::write(path, self.snapshot_bytes())?;
        Ok(())
    }

    pub fn load_snapshot<P: AsRef<Path>>(path: P) -> Result<Self, SnapshotError> {
        Self::from_snapshot_bytes(&std::fs::read(path)?)
    }
}
