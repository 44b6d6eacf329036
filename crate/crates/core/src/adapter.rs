//! Multi-modal adapter stack.
//!
//! Block `j` holds modality-specific down/up projections and one shared
//! `r x r` projection used by both encoders:
//!
//! ```text
//! A_img(z) = W_u_img * gelu(W_s * gelu(W_d_img * z))
//! A_txt(z) = W_u_txt * gelu(W_s * gelu(W_d_txt * z))
//! ```
//!
//! The encoder adds `alpha * A(z)` to the output of the block's MLP sub-layer.

use crate::backbone::{AdapterHook, Modality};
use crate::container::{Container, Kind, MetaReader, MetaWriter, FIXED_HEADER_BYTES};
use crate::error::{Error, Result};
use crate::rng::{tag, CtrRng};
use crate::tensorcore::{Gradients, ParamId, Tape, Tensor, Var};

/// Matrices per adapter block, in serialization order.
pub const MATRICES_PER_BLOCK: usize = 5;
/// Bytes of container header + adapter metadata preceding the values of a round message.
pub const WIRE_HEADER_BYTES: usize = FIXED_HEADER_BYTES + 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Matrix {
    DownImg = 0,
    UpImg = 1,
    DownTxt = 2,
    UpTxt = 3,
    Shared = 4,
}

impl Matrix {
    pub const ALL: [Matrix; 5] = [Matrix::DownImg, Matrix::UpImg, Matrix::DownTxt, Matrix::UpTxt, Matrix::Shared];
}

#[derive(Debug, Clone, PartialEq)]
pub struct MMABlock {
    pub w_down_img: Tensor,
    pub w_up_img: Tensor,
    pub w_down_txt: Tensor,
    pub w_up_txt: Tensor,
    pub w_shared: Tensor,
    /// 1-based transformer block this adapter attaches to.
    pub block_index: usize,
}

impl MMABlock {
    pub fn matrix(&self, m: Matrix) -> &Tensor {
        match m {
            Matrix::DownImg => &self.w_down_img,
            Matrix::UpImg => &self.w_up_img,
            Matrix::DownTxt => &self.w_down_txt,
            Matrix::UpTxt => &self.w_up_txt,
            Matrix::Shared => &self.w_shared,
        }
    }

    pub fn matrix_mut(&mut self, m: Matrix) -> &mut Tensor {
        match m {
            Matrix::DownImg => &mut self.w_down_img,
            Matrix::UpImg => &mut self.w_up_img,
            Matrix::DownTxt => &mut self.w_down_txt,
            Matrix::UpTxt => &mut self.w_up_txt,
            Matrix::Shared => &mut self.w_shared,
        }
    }

    /// Down/shared/up matrices for one modality; the shared one is the same instance for both.
    pub fn path(&self, modality: Modality) -> (&Tensor, &Tensor, &Tensor) {
        match modality {
            Modality::Vision => (&self.w_down_img, &self.w_shared, &self.w_up_img),
            Modality::Text => (&self.w_down_txt, &self.w_shared, &self.w_up_txt),
        }
    }

    /// Plain-value visual contribution `alpha * A_img(z)` for `z: tokens x d`.
    pub fn forward_visual(&self, z: &Tensor, alpha: f64) -> Result<Tensor> {
        self.forward_plain(Modality::Vision, z, alpha)
    }

    pub fn forward_text(&self, z: &Tensor, alpha: f64) -> Result<Tensor> {
        self.forward_plain(Modality::Text, z, alpha)
    }

    fn forward_plain(&self, modality: Modality, z: &Tensor, alpha: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (down, shared, up) = self.path(modality);
        let vars = PathVars { down: tape.constant_ref(down), shared: tape.constant_ref(shared), up: tape.constant_ref(up) };
        let zv = tape.constant_ref(z);
        let out = adapter_forward(&mut tape, vars, zv, alpha)?;
        Ok(tape.value(out).clone())
    }

    fn validate(&self, d: usize, r: usize) -> Result<()> {
        let expect = [(r, d), (d, r), (r, d), (d, r), (r, r)];
        for (m, want) in Matrix::ALL.iter().zip(expect) {
            let t = self.matrix(*m);
            if t.dims() != want {
                return Err(Error::shape("adapter block", t.shape(), &[want.0, want.1]));
            }
            if !t.is_finite() {
                return Err(Error::Numeric(format!("adapter matrix {m:?} has non-finite entries")));
            }
        }
        Ok(())
    }
}

/// Tape handles for one modality path of one block.
#[derive(Debug, Clone, Copy)]
pub struct PathVars {
    pub down: Var,
    pub shared: Var,
    pub up: Var,
}

/// `alpha * gelu(gelu(z W_d^T) W_s^T) W_u^T`, the row-major form of the column formula.
pub fn adapter_forward(tape: &mut Tape<'_>, p: PathVars, z: Var, alpha: f64) -> Result<Var> {
    let a = tape.matmul_nt(z, p.down)?;
    let a = tape.gelu(a)?;
    let s = tape.matmul_nt(a, p.shared)?;
    let s = tape.gelu(s)?;
    let u = tape.matmul_nt(s, p.up)?;
    tape.scale(u, alpha)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MMAStack {
    pub blocks: Vec<MMABlock>,
    pub alpha: f64,
    pub r: usize,
    pub d: usize,
}

/// Borrowed partition of the stack's parameters.
pub struct ParamSplit<'s> {
    pub shared: Vec<&'s Tensor>,
    pub local: Vec<&'s Tensor>,
}

impl MMAStack {
    /// Down and shared projections are drawn with std `1/sqrt(d)` and
    /// `1/sqrt(r)`; up projections start at zero so the stack is inert.
    /// Matrix `m` of block `j` uses stream `(seed, [ADAPTER, j, m])`.
    pub fn init(d: usize, r: usize, first: usize, last: usize, alpha: f64, seed: u64) -> Result<Self> {
        if first == 0 || first > last {
            return Err(Error::Config(format!("adapter blocks need 1 <= first ({first}) <= last ({last})")));
        }
        if r == 0 || r >= d {
            return Err(Error::Config(format!("bottleneck r={r} must satisfy 0 < r < d={d}")));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be finite and non-negative, got {alpha}")));
        }
        let gaussian = |j: usize, m: Matrix, rows: usize, cols: usize, std: f64| {
            let mut rng = CtrRng::for_stream(seed, &[tag::ADAPTER, j as u64, m as u64]);
            let v = (0..rows * cols).map(|_| rng.normal() * std).collect();
            Tensor::matrix(rows, cols, v).expect("positive dims")
        };
        let sd = 1.0 / (d as f64).sqrt();
        let sr = 1.0 / (r as f64).sqrt();
        let blocks = (first..=last)
            .map(|j| MMABlock {
                w_down_img: gaussian(j, Matrix::DownImg, r, d, sd),
                w_up_img: Tensor::zeros(d, r),
                w_down_txt: gaussian(j, Matrix::DownTxt, r, d, sd),
                w_up_txt: Tensor::zeros(d, r),
                w_shared: gaussian(j, Matrix::Shared, r, r, sr),
                block_index: j,
            })
            .collect();
        Ok(Self { blocks, alpha, r, d })
    }

    pub fn first_block(&self) -> usize {
        self.blocks.first().map_or(1, |b| b.block_index)
    }

    pub fn last_block(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.block_index)
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks.iter().flat_map(|b| Matrix::ALL.map(|m| b.matrix(m).len())).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.blocks.iter().enumerate() {
            if b.block_index != self.first_block() + i {
                return Err(Error::Contract("adapter block indices must be contiguous".into()));
            }
            b.validate(self.d, self.r)?;
        }
        Ok(())
    }

    pub fn param_id(stack_pos: usize, m: Matrix) -> ParamId {
        ParamId((stack_pos * MATRICES_PER_BLOCK + m as usize) as u32)
    }

    /// Shared projections (one per block) and the four local matrices per block.
    pub fn split_params(&self) -> ParamSplit<'_> {
        let mut shared = Vec::with_capacity(self.blocks.len());
        let mut local = Vec::with_capacity(4 * self.blocks.len());
        for b in &self.blocks {
            shared.push(&b.w_shared);
            local.extend([&b.w_down_img, &b.w_up_img, &b.w_down_txt, &b.w_up_txt]);
        }
        ParamSplit { shared, local }
    }

    pub fn shared(&self) -> Vec<Tensor> {
        self.blocks.iter().map(|b| b.w_shared.clone()).collect()
    }

    /// Overwrites the shared projections with copies of `shared`.
    pub fn set_shared(&mut self, shared: &[Tensor]) -> Result<()> {
        if shared.len() != self.blocks.len() {
            return Err(Error::Protocol(format!("expected {} shared matrices, got {}", self.blocks.len(), shared.len())));
        }
        for (b, s) in self.blocks.iter().zip(shared) {
            if !b.w_shared.same_shape(s) {
                return Err(Error::Protocol(format!(
                    "shared matrix shape {:?} does not match {:?}",
                    s.shape(),
                    b.w_shared.shape()
                )));
            }
        }
        for (b, s) in self.blocks.iter_mut().zip(shared) {
            b.w_shared = s.clone();
        }
        Ok(())
    }

    /// Plain gradient descent on every parameter that has a gradient entry.
    pub fn sgd_step(&mut self, grads: &Gradients, eta: f64) -> Result<()> {
        if !(eta > 0.0) {
            return Err(Error::Contract(format!("learning rate must be positive, got {eta}")));
        }
        for (pos, b) in self.blocks.iter_mut().enumerate() {
            for m in Matrix::ALL {
                if let Some(g) = grads.get(&Self::param_id(pos, m)) {
                    sgd_update(b.matrix_mut(m), g, eta)?;
                }
            }
        }
        Ok(())
    }

    /// Registers the stack on a tape; trainable leaves use [`MMAStack::param_id`].
    pub fn attach<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> StackVars {
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(pos, b)| Matrix::ALL.map(|m| tape.leaf_ref(Self::param_id(pos, m), b.matrix(m), trainable)))
            .collect();
        StackVars { blocks, first: self.first_block(), alpha: self.alpha }
    }

    fn meta(&self) -> Vec<u8> {
        MetaWriter::new()
            .u32(self.d as u32)
            .u32(self.r as u32)
            .u32(self.first_block() as u32)
            .u32(self.last_block() as u32)
            .f64(self.alpha)
            .finish()
    }

    /// Every matrix, block by block, in [`Matrix::ALL`] order.
    pub fn to_container(&self) -> Container {
        let values = self.blocks.iter().flat_map(|b| Matrix::ALL.map(|m| b.matrix(m).values().to_vec())).flatten().collect();
        Container { kind: Kind::AdapterFull, meta: self.meta(), values }
    }

    /// Shared projections only, block by block.
    pub fn shared_container(&self) -> Container {
        let values = self.blocks.iter().flat_map(|b| b.w_shared.values().to_vec()).collect();
        Container { kind: Kind::AdapterShared, meta: self.meta(), values }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != Kind::AdapterFull {
            return Err(Error::Format(format!("expected full adapter container, found {:?}", c.kind)));
        }
        let (d, r, first, last, alpha) = read_adapter_meta(&c.meta)?;
        let per_block = 4 * d * r + r * r;
        let n = last + 1 - first;
        if c.values.len() != n * per_block {
            return Err(Error::Format(format!("adapter payload has {} values, expected {}", c.values.len(), n * per_block)));
        }
        let shapes = [(r, d), (d, r), (r, d), (d, r), (r, r)];
        let mut off = 0;
        let mut blocks = Vec::with_capacity(n);
        for j in first..=last {
            let mut mats = Vec::with_capacity(5);
            for (rows, cols) in shapes {
                mats.push(Tensor::matrix(rows, cols, c.values[off..off + rows * cols].to_vec())?);
                off += rows * cols;
            }
            let mut it = mats.into_iter();
            blocks.push(MMABlock {
                w_down_img: it.next().expect("5"),
                w_up_img: it.next().expect("5"),
                w_down_txt: it.next().expect("5"),
                w_up_txt: it.next().expect("5"),
                w_shared: it.next().expect("5"),
                block_index: j,
            });
        }
        let s = Self { blocks, alpha, r, d };
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_container().encode(true))?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(&Container::decode(&std::fs::read(path)?)?)
    }
}

/// Parses the shared-projection payload produced by [`MMAStack::shared_container`].
pub fn shared_from_container(c: &Container) -> Result<(usize, usize, Vec<Tensor>)> {
    if c.kind != Kind::AdapterShared {
        return Err(Error::Format(format!("expected shared adapter container, found {:?}", c.kind)));
    }
    let (_, r, first, last, _) = read_adapter_meta(&c.meta)?;
    let n = last + 1 - first;
    if c.values.len() != n * r * r {
        return Err(Error::Format(format!("shared payload has {} values, expected {}", c.values.len(), n * r * r)));
    }
    let mats = c.values.chunks_exact(r * r).map(|v| Tensor::matrix(r, r, v.to_vec())).collect::<Result<_>>()?;
    Ok((first, last, mats))
}

fn read_adapter_meta(meta: &[u8]) -> Result<(usize, usize, usize, usize, f64)> {
    let mut r = MetaReader::new(meta);
    let d = r.u32()? as usize;
    let rr = r.u32()? as usize;
    let first = r.u32()? as usize;
    let last = r.u32()? as usize;
    let alpha = r.f64()?;
    if d == 0 || rr == 0 || first == 0 || first > last {
        return Err(Error::Format("invalid adapter metadata".into()));
    }
    Ok((d, rr, first, last, alpha))
}

/// `W <- W - eta * g`.
pub fn sgd_update(w: &mut Tensor, g: &Tensor, eta: f64) -> Result<()> {
    if !w.same_shape(g) {
        return Err(Error::Contract(format!("gradient shape {:?} does not match parameter shape {:?}", g.shape(), w.shape())));
    }
    for (wv, gv) in w.values_mut().iter_mut().zip(g.values()) {
        *wv -= eta * gv;
    }
    Ok(())
}

/// Updates each `(id, tensor)` pair that has a gradient; others are left alone.
pub fn sgd_step(params: &mut [(ParamId, &mut Tensor)], grads: &Gradients, eta: f64) -> Result<()> {
    if !(eta > 0.0) {
        return Err(Error::Contract(format!("learning rate must be positive, got {eta}")));
    }
    for (id, t) in params.iter_mut() {
        if let Some(g) = grads.get(id) {
            sgd_update(t, g, eta)?;
        }
    }
    Ok(())
}

/// The stack registered on a tape.
pub struct StackVars {
    /// Per block, indexed by [`Matrix`].
    pub blocks: Vec<[Var; 5]>,
    first: usize,
    alpha: f64,
}

impl StackVars {
    pub fn path(&self, stack_pos: usize, modality: Modality) -> PathVars {
        let b = &self.blocks[stack_pos];
        match modality {
            Modality::Vision => {
                PathVars { down: b[Matrix::DownImg as usize], shared: b[Matrix::Shared as usize], up: b[Matrix::UpImg as usize] }
            }
            Modality::Text => {
                PathVars { down: b[Matrix::DownTxt as usize], shared: b[Matrix::Shared as usize], up: b[Matrix::UpTxt as usize] }
            }
        }
    }
}

impl AdapterHook for StackVars {
    fn first_block(&self) -> usize {
        self.first
    }

    fn contribution(&self, tape: &mut Tape<'_>, modality: Modality, block: usize, hidden: Var) -> Result<Option<Var>> {
        if block < self.first || block >= self.first + self.blocks.len() {
            return Ok(None);
        }
        let p = self.path(block - self.first, modality);
        adapter_forward(tape, p, hidden, self.alpha).map(Some)
    }
}
