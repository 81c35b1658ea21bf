//! N-way K-shot episode sampling over the novel (unseen) classes.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::bundle::DatasetBundle;
use super::schema::Split;
use crate::error::{Error, Result};

/// One few-shot task. `support[w]` and `query[w]` hold sample indices of
/// `classes[w]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<u32>,
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
}

impl Episode {
    /// Query samples with their position in `classes`.
    pub fn labeled_queries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.query
            .iter()
            .enumerate()
            .flat_map(|(w, q)| q.iter().map(move |&i| (i, w)))
    }
}

pub fn make_episodes(
    bundle: &DatasetBundle,
    way: usize,
    shot: usize,
    query: usize,
    episodes: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    if way == 0 || shot == 0 || query == 0 {
        return Err(Error::InvalidArgument(
            "way, shot and query must be positive".into(),
        ));
    }
    let novel = bundle.classes.ids(Split::Unseen);
    if novel.len() < way {
        return Err(Error::InvalidArgument(format!(
            "{way}-way episodes need {way} novel classes, bundle has {}",
            novel.len()
        )));
    }
    let pools: Vec<Vec<usize>> = novel.iter().map(|&id| bundle.samples_of(id)).collect();
    for (id, pool) in novel.iter().zip(&pools) {
        if pool.len() < shot + query {
            return Err(Error::InsufficientSamples {
                class: *id,
                needed: shot + query,
                available: pool.len(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut picked = index::sample(&mut rng, novel.len(), way).into_vec();
        picked.sort_unstable();
        picked.shuffle(&mut rng);
        let mut ep = Episode {
            classes: Vec::with_capacity(way),
            support: Vec::with_capacity(way),
            query: Vec::with_capacity(way),
        };
        for c in picked {
            let pool = &pools[c];
            let draw = index::sample(&mut rng, pool.len(), shot + query);
            let chosen: Vec<usize> = draw.iter().map(|i| pool[i]).collect();
            ep.classes.push(novel[c]);
            ep.support.push(chosen[..shot].to_vec());
            ep.query.push(chosen[shot..].to_vec());
        }
        out.push(ep);
    }
    Ok(out)
}
