use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::generate::{ClassSpec, Sample};
use crate::error::{Error, Result};
use crate::rng::{tag, CtrRng};
use crate::tensorcore::Tensor;

const PARTITION_TRIES: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum Scheme {
    Pathological,
    Dirichlet { beta: f64 },
}

/// Sample-to-client routing plus the class bookkeeping used by evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    #[serde(flatten)]
    pub scheme: Scheme,
    pub clients: usize,
    /// Client of each sample; `None` for novel (or unused) classes.
    pub assignment: Vec<Option<usize>>,
    /// Ascending class ids present in each client's shard.
    pub base_classes: Vec<Vec<usize>>,
    pub novel_classes: Vec<usize>,
}

impl PartitionPlan {
    /// Sample indices owned by `client`, ascending.
    pub fn shard(&self, client: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == Some(client)).collect()
    }

    /// Union of every client's classes, ascending.
    pub fn all_base_classes(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.base_classes.iter().flatten().copied().collect();
        set.into_iter().collect()
    }

    /// Checks disjointness and exhaustiveness against the sample labels.
    ///
    /// Every sample whose class belongs to some client's class set is owned
    /// by exactly one client holding that class; novel samples are owned by
    /// nobody; pathological plans additionally have pairwise disjoint class
    /// sets.
    pub fn validate(&self, labels: &[usize]) -> Result<()> {
        let bad = |m: String| Err(Error::Partition(m));
        if self.assignment.len() != labels.len() {
            return bad(format!("plan covers {} samples, dataset has {}", self.assignment.len(), labels.len()));
        }
        if self.base_classes.len() != self.clients {
            return bad("one class list per client is required".into());
        }
        let novel: BTreeSet<usize> = self.novel_classes.iter().copied().collect();
        let base: BTreeSet<usize> = self.all_base_classes().into_iter().collect();
        if let Some(c) = base.intersection(&novel).next() {
            return bad(format!("class {c} is both novel and assigned to a client"));
        }
        if matches!(self.scheme, Scheme::Pathological) {
            let total: usize = self.base_classes.iter().map(Vec::len).sum();
            if total != base.len() {
                return bad("pathological client class sets overlap".into());
            }
        }
        for (i, (&a, &label)) in self.assignment.iter().zip(labels).enumerate() {
            match a {
                Some(c) if c >= self.clients => return bad(format!("sample {i} routed to unknown client {c}")),
                Some(c) if !self.base_classes[c].contains(&label) => {
                    return bad(format!("sample {i} of class {label} routed to client {c} that does not hold it"))
                }
                Some(_) if novel.contains(&label) => return bad(format!("novel sample {i} was assigned")),
                None if base.contains(&label) => return bad(format!("sample {i} of base class {label} is unassigned")),
                _ => {}
            }
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], k_total: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= k_total) {
        Some(l) => Err(Error::Config(format!("label {l} outside 0..{k_total}"))),
        None => Ok(()),
    }
}

/// Client `i` gets classes `[i * cpc, (i + 1) * cpc)`; the last `novel_count`
/// classes are novel. Classes in between (if any) are unused.
pub fn pathological_split(
    labels: &[usize],
    k_total: usize,
    clients: usize,
    classes_per_client: usize,
    novel_count: usize,
) -> Result<PartitionPlan> {
    if clients == 0 || classes_per_client == 0 {
        return Err(Error::Config("pathological split needs clients >= 1 and classes_per_client >= 1".into()));
    }
    if clients * classes_per_client + novel_count > k_total {
        return Err(Error::Config(format!(
            "pathological split infeasible: {clients} clients x {classes_per_client} classes + {novel_count} novel > {k_total} classes"
        )));
    }
    check_labels(labels, k_total)?;
    let assignment = labels.iter().map(|&l| (l < clients * classes_per_client).then(|| l / classes_per_client)).collect();
    Ok(PartitionPlan {
        scheme: Scheme::Pathological,
        clients,
        assignment,
        base_classes: (0..clients).map(|i| (i * classes_per_client..(i + 1) * classes_per_client).collect()).collect(),
        novel_classes: (k_total - novel_count..k_total).collect(),
    })
}

/// Per non-novel class, proportions `~ Dir(beta 1_N)` and per-sample routing
/// by a categorical draw. Attempt `a` uses stream `(seed, [PARTITION, a, class])`;
/// the whole partition is redrawn while any client is empty.
pub fn dirichlet_split(
    labels: &[usize],
    k_total: usize,
    clients: usize,
    beta: f64,
    novel_count: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    if clients == 0 {
        return Err(Error::Config("dirichlet split needs at least one client".into()));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("dirichlet beta must be positive, got {beta}")));
    }
    if novel_count >= k_total {
        return Err(Error::Config(format!("{novel_count} novel classes leave no base classes out of {k_total}")));
    }
    check_labels(labels, k_total)?;
    let first_novel = k_total - novel_count;
    let alphas = vec![beta; clients];
    for attempt in 0..PARTITION_TRIES {
        let mut assignment = vec![None; labels.len()];
        for class in 0..first_novel {
            let mut rng = CtrRng::for_stream(seed, &[tag::PARTITION, attempt, class as u64]);
            let props = rng.dirichlet(&alphas);
            for (a, _) in assignment.iter_mut().zip(labels).filter(|(_, &l)| l == class) {
                *a = Some(rng.categorical(&props));
            }
        }
        let mut base: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); clients];
        for (a, &l) in assignment.iter().zip(labels) {
            if let Some(c) = a {
                base[*c].insert(l);
            }
        }
        if base.iter().all(|b| !b.is_empty()) {
            return Ok(PartitionPlan {
                scheme: Scheme::Dirichlet { beta },
                clients,
                assignment,
                base_classes: base.into_iter().map(|b| b.into_iter().collect()).collect(),
                novel_classes: (first_novel..k_total).collect(),
            });
        }
    }
    Err(Error::Partition(format!(
        "every one of {PARTITION_TRIES} dirichlet draws left a client empty; use more samples or a larger beta"
    )))
}

/// A client's labeled support set. Targets index into `classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotSet {
    pub images: Vec<Tensor>,
    pub targets: Vec<usize>,
    /// Global class ids, ascending.
    pub classes: Vec<usize>,
    pub class_tokens: Vec<Vec<usize>>,
    pub shots: usize,
}

impl FewShotSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Builds a set from explicit items; `targets` must index `class_tokens`.
    pub fn new(
        images: Vec<Tensor>,
        targets: Vec<usize>,
        classes: Vec<usize>,
        class_tokens: Vec<Vec<usize>>,
        shots: usize,
    ) -> Result<Self> {
        if images.len() != targets.len() {
            return Err(Error::Contract("one target per image is required".into()));
        }
        if classes.len() != class_tokens.len() {
            return Err(Error::Contract("every class needs a token sequence".into()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= class_tokens.len()) {
            return Err(Error::Index { what: "few-shot target", index: t, len: class_tokens.len() });
        }
        Ok(Self { images, targets, classes, class_tokens, shots })
    }
}

/// Up to `shots` samples per class present in `shard` (all of them when a
/// class has fewer). Class `c` draws from stream `(seed, [FEW_SHOT, c])`.
pub fn few_shot_sample(
    samples: &[Sample],
    shard: &[usize],
    classes: &[ClassSpec],
    shots: usize,
    seed: u64,
) -> Result<FewShotSet> {
    if shard.is_empty() {
        return Err(Error::Contract("few-shot sampling from an empty shard".into()));
    }
    if shots == 0 {
        return Err(Error::Config("shots per class must be at least 1".into()));
    }
    let present: BTreeSet<usize> = shard.iter().map(|&i| samples[i].label).collect();
    let class_ids: Vec<usize> = present.into_iter().collect();
    let mut images = Vec::new();
    let mut targets = Vec::new();
    let mut class_tokens = Vec::with_capacity(class_ids.len());
    for (pos, &c) in class_ids.iter().enumerate() {
        let spec = classes.get(c).ok_or(Error::Index { what: "class", index: c, len: classes.len() })?;
        class_tokens.push(spec.tokens.clone());
        let members: Vec<usize> = shard.iter().copied().filter(|&i| samples[i].label == c).collect();
        let mut rng = CtrRng::for_stream(seed, &[tag::FEW_SHOT, c as u64]);
        for j in rng.sample_indices(members.len(), shots) {
            images.push(samples[members[j]].image.clone());
            targets.push(pos);
        }
    }
    FewShotSet::new(images, targets, class_ids, class_tokens, shots)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(k: usize, per: usize) -> Vec<usize> {
        (0..k).flat_map(|c| std::iter::repeat_n(c, per)).collect()
    }

    #[test]
    fn pathological_deals_contiguous_blocks() {
        let l = labels(25, 3);
        let plan = pathological_split(&l, 25, 4, 5, 5).unwrap();
        assert_eq!(plan.base_classes[0], vec![0, 1, 2, 3, 4]);
        assert_eq!(plan.base_classes[3], vec![15, 16, 17, 18, 19]);
        assert_eq!(plan.novel_classes, vec![20, 21, 22, 23, 24]);
        plan.validate(&l).unwrap();
        assert_eq!(plan.shard(1), (15..30).collect::<Vec<_>>());
        assert!(matches!(pathological_split(&l, 25, 5, 5, 1), Err(Error::Config(_))));
    }

    #[test]
    fn dirichlet_single_client_gets_everything() {
        let l = labels(6, 4);
        let plan = dirichlet_split(&l, 6, 1, 0.3, 2, 7).unwrap();
        assert_eq!(plan.shard(0), (0..16).collect::<Vec<_>>());
        plan.validate(&l).unwrap();
    }

    #[test]
    fn dirichlet_reports_impossible_partitions() {
        // one base sample cannot feed two clients
        let l = vec![0, 1];
        assert!(matches!(dirichlet_split(&l, 2, 2, 0.3, 1, 0), Err(Error::Partition(_))));
    }

    #[test]
    fn few_shot_clamps_and_is_deterministic() {
        let samples: Vec<Sample> = labels(3, 4)
            .into_iter()
            .enumerate()
            .map(|(i, label)| Sample { image: Tensor::filled(1, 1, i as f64), label, domain: 0 })
            .collect();
        let classes: Vec<ClassSpec> =
            (0..3).map(|index| ClassSpec { index, prototype: Tensor::zeros(1, 1), tokens: vec![index] }).collect();
        let shard: Vec<usize> = (0..12).collect();
        let all = few_shot_sample(&samples, &shard, &classes, 10, 1).unwrap();
        assert_eq!(all.len(), 12);
        let one = few_shot_sample(&samples, &shard, &classes, 1, 1).unwrap();
        assert_eq!(one.targets, vec![0, 1, 2]);
        assert_eq!(one, few_shot_sample(&samples, &shard, &classes, 1, 1).unwrap());
        assert!(matches!(few_shot_sample(&samples, &[], &classes, 1, 1), Err(Error::Contract(_))));
    }
}
