use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::PromptTemplate;
use crate::container::{sha256_hex, Container, Kind, MetaReader, MetaWriter};
use crate::error::{Error, Result};
use crate::rng::{tag, CtrRng};
use crate::tensorcore::{matmul, Tensor};

const PROTOTYPE_TRIES: u64 = 100;

/// One class: its prototype image and prompt tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    pub index: usize,
    /// `p x d_in`.
    pub prototype: Tensor,
    pub tokens: Vec<usize>,
}

/// Per-domain feature shift: `x -> x Q + b + noise * eps`, applied to every patch row.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainTransform {
    pub index: usize,
    /// Orthogonal `d_in x d_in`.
    pub map: Tensor,
    /// `1 x d_in`.
    pub bias: Tensor,
    pub noise: f64,
}

impl DomainTransform {
    pub fn identity(index: usize, d_in: usize) -> Self {
        Self { index, map: Tensor::eye(d_in), bias: Tensor::zeros(1, d_in), noise: 0.0 }
    }

    /// Largest entry of `|Q^T Q - I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let qtq = crate::tensorcore::matmul_tn(&self.map, &self.map).expect("square map");
        qtq.max_abs_diff(&Tensor::eye(self.map.rows()))
    }

    pub fn apply(&self, x: &Tensor, rng: &mut CtrRng) -> Result<Tensor> {
        let mut y = matmul(x, &self.map)?;
        let cols = y.cols();
        let noise = self.noise;
        for (i, v) in y.values_mut().iter_mut().enumerate() {
            *v += self.bias.values()[i % cols];
            if noise > 0.0 {
                *v += noise * rng.normal();
            }
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    pub domain: usize,
}

/// Which draw of the generator a sample set comes from. Each split has its
/// own RNG streams so that, for example, test images never coincide with
/// training images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSplit {
    Train = 0,
    Test = 1,
    Pretrain = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub classes: Vec<ClassSpec>,
}

/// Gram-Schmidt on a Gaussian matrix; rows of the result are orthonormal.
pub fn orthogonal(n: usize, rng: &mut CtrRng) -> Tensor {
    loop {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut ok = true;
        for _ in 0..n {
            let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            // two passes keep the basis orthogonal to working precision
            for _ in 0..2 {
                for u in &rows {
                    let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                    for (x, y) in v.iter_mut().zip(u) {
                        *x -= dot * y;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            rows.push(v);
        }
        if ok {
            return Tensor::matrix(n, n, rows.concat()).expect("square");
        }
    }
}

/// Domain 0 is the identity; domain `i > 0` gets a random rotation, a
/// Gaussian bias of scale `bias` and additive noise `noise`, drawn from
/// stream `(seed, [DOMAINS, i])`.
pub fn make_domains(count: usize, d_in: usize, bias: f64, noise: f64, seed: u64) -> Result<Vec<DomainTransform>> {
    if count == 0 {
        return Err(Error::Config("at least one domain is required".into()));
    }
    Ok((0..count)
        .map(|i| {
            if i == 0 {
                return DomainTransform::identity(0, d_in);
            }
            let mut rng = CtrRng::for_stream(seed, &[tag::DOMAINS, i as u64]);
            let map = orthogonal(d_in, &mut rng);
            let b = (0..d_in).map(|_| bias * rng.normal()).collect();
            DomainTransform { index: i, map, bias: Tensor::row_vector(b), noise }
        })
        .collect())
}

fn min_pairwise_distance(protos: &[Tensor]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..protos.len() {
        for j in i + 1..protos.len() {
            let d = protos[i].values().iter().zip(protos[j].values()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            best = best.min(d);
        }
    }
    best
}

/// `k` prototypes of shape `p x d_in`, uniform on the sphere of the given
/// radius, redrawn (as a set) until every pair is at least `margin` apart.
/// Attempt `a` uses streams `(seed, [PROTOTYPES, a, class])`.
pub fn generate_prototypes(k: usize, p: usize, d_in: usize, radius: f64, margin: f64, seed: u64) -> Result<Vec<Tensor>> {
    if k < 2 {
        return Err(Error::Config(format!("need at least two classes, got {k}")));
    }
    if p == 0 || d_in == 0 || !(radius > 0.0) || !(margin >= 0.0) {
        return Err(Error::Config("prototype shape, radius and margin must be positive".into()));
    }
    for attempt in 0..PROTOTYPE_TRIES {
        let protos: Vec<Tensor> = (0..k)
            .map(|c| {
                let mut rng = CtrRng::for_stream(seed, &[tag::PROTOTYPES, attempt, c as u64]);
                let v: Vec<f64> = (0..p * d_in).map(|_| rng.normal()).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                Tensor::matrix(p, d_in, v.iter().map(|x| radius * x / norm).collect()).expect("positive dims")
            })
            .collect();
        if min_pairwise_distance(&protos) >= margin {
            return Ok(protos);
        }
    }
    Err(Error::Generation(format!(
        "no prototype set with pairwise margin {margin} found in {PROTOTYPE_TRIES} tries; lower the margin or raise the radius"
    )))
}

/// `per_class` samples for each prototype. Sample `i` of class `k` is
/// `domain_map(prototype_k + sigma * eps)` with domain `i mod domains.len()`,
/// drawn from stream `(seed, [SAMPLES, split, k, i])`. Samples are ordered by
/// class, then index.
pub fn generate_samples(
    prototypes: &[Tensor],
    per_class: usize,
    sigma: f64,
    domains: &[DomainTransform],
    split: SampleSplit,
    seed: u64,
) -> Result<Vec<Sample>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("noise sigma must be finite and >= 0, got {sigma}")));
    }
    if domains.is_empty() {
        return Err(Error::Config("at least one domain is required".into()));
    }
    let mut out = Vec::with_capacity(prototypes.len() * per_class);
    for (k, proto) in prototypes.iter().enumerate() {
        for i in 0..per_class {
            let mut rng = CtrRng::for_stream(seed, &[tag::SAMPLES, split as u64, k as u64, i as u64]);
            let mut x = proto.clone();
            if sigma > 0.0 {
                for v in x.values_mut() {
                    *v += sigma * rng.normal();
                }
            }
            let dom = &domains[i % domains.len()];
            let image = dom.apply(&x, &mut rng)?;
            out.push(Sample { image, label: k, domain: dom.index });
        }
    }
    Ok(out)
}

/// Prototypes plus one split of samples, with prompt tokens from `template`.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    k: usize,
    per_class: usize,
    sigma: f64,
    domains: &[DomainTransform],
    shape: (usize, usize),
    radius: f64,
    margin: f64,
    template: &PromptTemplate,
    seed: u64,
) -> Result<Dataset> {
    let protos = generate_prototypes(k, shape.0, shape.1, radius, margin, seed)?;
    let samples = generate_samples(&protos, per_class, sigma, domains, SampleSplit::Train, seed)?;
    let classes = protos
        .into_iter()
        .enumerate()
        .map(|(index, prototype)| ClassSpec { index, prototype, tokens: template.tokens_for(index) })
        .collect();
    Ok(Dataset { samples, classes })
}

/// JSON sidecar written next to a dataset dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub classes: usize,
    pub samples: usize,
    pub patches: usize,
    pub patch_dim: usize,
    pub sha256: String,
}

impl Dataset {
    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Meta: class count, sample count, patches, patch width, then per class
    /// its token count and tokens, then per sample its label and domain.
    /// Values: prototypes followed by sample images.
    pub fn to_container(&self) -> Container {
        let (p, d_in) = self.classes.first().map_or((0, 0), |c| c.prototype.dims());
        let mut w =
            MetaWriter::new().u32(self.classes.len() as u32).u32(self.samples.len() as u32).u32(p as u32).u32(d_in as u32);
        for c in &self.classes {
            w = w.u32(c.tokens.len() as u32);
            for &t in &c.tokens {
                w = w.u32(t as u32);
            }
        }
        for s in &self.samples {
            w = w.u32(s.label as u32).u32(s.domain as u32);
        }
        let values = self
            .classes
            .iter()
            .map(|c| &c.prototype)
            .chain(self.samples.iter().map(|s| &s.image))
            .flat_map(|t| t.values().iter().copied())
            .collect();
        Container { kind: Kind::Dataset, meta: w.finish(), values }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != Kind::Dataset {
            return Err(Error::Format(format!("expected dataset container, found {:?}", c.kind)));
        }
        let mut r = MetaReader::new(&c.meta);
        let k = r.u32()? as usize;
        let n = r.u32()? as usize;
        let p = r.u32()? as usize;
        let d_in = r.u32()? as usize;
        let block = p * d_in;
        if c.values.len() != (k + n) * block {
            return Err(Error::Format("dataset payload size does not match its header".into()));
        }
        let mut chunks = c.values.chunks_exact(block.max(1));
        let mut classes = Vec::with_capacity(k);
        for index in 0..k {
            let len = r.u32()? as usize;
            let tokens = (0..len).map(|_| r.u32().map(|t| t as usize)).collect::<Result<_>>()?;
            let prototype = Tensor::matrix(p, d_in, chunks.next().expect("sized").to_vec())?;
            classes.push(ClassSpec { index, prototype, tokens });
        }
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let label = r.u32()? as usize;
            let domain = r.u32()? as usize;
            if label >= k {
                return Err(Error::Format(format!("sample label {label} out of range 0..{k}")));
            }
            let image = Tensor::matrix(p, d_in, chunks.next().expect("sized").to_vec())?;
            samples.push(Sample { image, label, domain });
        }
        Ok(Self { samples, classes })
    }

    /// SHA-256 of the encoded container (without trailer).
    pub fn digest(&self) -> String {
        sha256_hex(&self.to_container().encode(false))
    }

    /// Writes `<path>` (binary container) and `<path>.json` (sidecar).
    pub fn dump(&self, path: &Path) -> Result<()> {
        let c = self.to_container();
        std::fs::write(path, c.encode(true))?;
        let (p, d_in) = self.classes.first().map_or((0, 0), |c| c.prototype.dims());
        let side = DatasetSidecar {
            classes: self.classes.len(),
            samples: self.samples.len(),
            patches: p,
            patch_dim: d_in,
            sha256: self.digest(),
        };
        let mut name = path.as_os_str().to_owned();
        name.push(".json");
        std::fs::write(Path::new(&name), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::decode(&std::fs::read(path)?)?)
    }
}
