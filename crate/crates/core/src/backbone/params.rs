//! Parameter records of the dual encoder, generic over the stored item so the
//! same layout holds plain tensors and tape handles.

/// One pre-norm transformer block. Weight matrices are stored `in x out`
/// (applied as `x * W`).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_g: T,
    pub ln1_b: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln2_g: T,
    pub ln2_b: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T> BlockParams<T> {
    pub const COUNT: usize = 16;

    pub fn refs(&self) -> [&T; 16] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_g,
            &self.ln2_b,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    pub fn refs_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    fn take<U>(it: &mut impl Iterator<Item = U>) -> BlockParams<U> {
        let mut n = || it.next().expect("parameter stream exhausted");
        BlockParams {
            ln1_g: n(),
            ln1_b: n(),
            wq: n(),
            bq: n(),
            wk: n(),
            bk: n(),
            wv: n(),
            bv: n(),
            wo: n(),
            bo: n(),
            ln2_g: n(),
            ln2_b: n(),
            w1: n(),
            b1: n(),
            w2: n(),
            b2: n(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub blocks: Vec<BlockParams<T>>,
    pub ln_g: T,
    pub ln_b: T,
    pub proj: T,
}

/// Every parameter of both encoders in canonical order:
/// patch_w, patch_b, cls, pos_img, vision blocks (16 each), vision ln_g,
/// ln_b, proj, tok_emb, pos_txt, text blocks, text ln_g, ln_b, proj.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub patch_w: T,
    pub patch_b: T,
    pub cls: T,
    pub pos_img: T,
    pub vision: EncoderParams<T>,
    pub tok_emb: T,
    pub pos_txt: T,
    pub text: EncoderParams<T>,
}

impl<T> Params<T> {
    pub fn refs(&self) -> Vec<&T> {
        let mut out = vec![&self.patch_w, &self.patch_b, &self.cls, &self.pos_img];
        push_encoder(&mut out, &self.vision);
        out.push(&self.tok_emb);
        out.push(&self.pos_txt);
        push_encoder(&mut out, &self.text);
        out
    }

    pub fn refs_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.patch_w, &mut self.patch_b, &mut self.cls, &mut self.pos_img];
        push_encoder_mut(&mut out, &mut self.vision);
        out.push(&mut self.tok_emb);
        out.push(&mut self.pos_txt);
        push_encoder_mut(&mut out, &mut self.text);
        out
    }

    /// Rebuilds the layout from items in canonical order.
    pub fn from_ordered<U>(layers: usize, items: impl IntoIterator<Item = U>) -> Params<U> {
        let mut it = items.into_iter();
        let patch_w = it.next().expect("patch_w");
        let patch_b = it.next().expect("patch_b");
        let cls = it.next().expect("cls");
        let pos_img = it.next().expect("pos_img");
        let vision = take_encoder(layers, &mut it);
        let tok_emb = it.next().expect("tok_emb");
        let pos_txt = it.next().expect("pos_txt");
        let text = take_encoder(layers, &mut it);
        assert!(it.next().is_none(), "parameter stream has leftovers");
        Params { patch_w, patch_b, cls, pos_img, vision, tok_emb, pos_txt, text }
    }

    pub fn map<'s, U>(&'s self, layers: usize, f: impl FnMut(usize, &'s T) -> U) -> Params<U> {
        let mut f = f;
        let items: Vec<U> = self.refs().into_iter().enumerate().map(|(i, t)| f(i, t)).collect();
        Params::<T>::from_ordered(layers, items)
    }
}

fn push_encoder<'a, T>(out: &mut Vec<&'a T>, e: &'a EncoderParams<T>) {
    for b in &e.blocks {
        out.extend(b.refs());
    }
    out.extend([&e.ln_g, &e.ln_b, &e.proj]);
}

fn push_encoder_mut<'a, T>(out: &mut Vec<&'a mut T>, e: &'a mut EncoderParams<T>) {
    for b in &mut e.blocks {
        out.extend(b.refs_mut());
    }
    out.push(&mut e.ln_g);
    out.push(&mut e.ln_b);
    out.push(&mut e.proj);
}

fn take_encoder<U>(layers: usize, it: &mut impl Iterator<Item = U>) -> EncoderParams<U> {
    let blocks = (0..layers).map(|_| BlockParams::<()>::take(it)).collect();
    EncoderParams { blocks, ln_g: it.next().expect("ln_g"), ln_b: it.next().expect("ln_b"), proj: it.next().expect("proj") }
}
