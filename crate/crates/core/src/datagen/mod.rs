//! Synthetic image/prompt data, domain shift, client partitioning and
//! few-shot sampling.

mod generate;
mod partition;

pub use generate::{
    generate_dataset, generate_prototypes, generate_samples, make_domains, orthogonal, ClassSpec, Dataset, DomainTransform,
    Sample, SampleSplit,
};
pub use partition::{dirichlet_split, few_shot_sample, pathological_split, FewShotSet, PartitionPlan, Scheme};
