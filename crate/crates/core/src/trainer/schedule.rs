use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

/// Replay items per batch: `floor(mix_ratio * batch_size)`, kept below the
/// batch size so every batch holds at least one current item.
pub fn replay_slots(mix_ratio: f64, batch_size: usize) -> usize {
    ((mix_ratio * batch_size as f64 + 1e-9).floor() as usize).min(batch_size.saturating_sub(1))
}

/// Indices into the current-task items and the replay pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub current: Vec<usize>,
    pub replay: Vec<usize>,
}

/// Produces epochs of mixed batches. Current items are reshuffled every
/// epoch and each appears exactly once. Replay items are drawn without
/// replacement from a fresh permutation each epoch; a pool smaller than the
/// epoch's replay demand is reshuffled and drawn again.
pub struct BatchScheduler {
    n_current: usize,
    n_replay: usize,
    batch_size: usize,
    slots: usize,
    current_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
}

impl BatchScheduler {
    pub fn new(
        n_current: usize,
        n_replay: usize,
        batch_size: usize,
        mix_ratio: f64,
        current_rng: ChaCha8Rng,
        replay_rng: ChaCha8Rng,
    ) -> Self {
        let slots = if n_replay == 0 { 0 } else { replay_slots(mix_ratio, batch_size) };
        Self {
            n_current,
            n_replay,
            batch_size,
            slots,
            current_rng,
            replay_rng,
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n_current.div_ceil(self.batch_size - self.slots)
    }

    pub fn replay_per_batch(&self) -> usize {
        self.slots
    }

    pub fn next_epoch(&mut self) -> Vec<Batch> {
        let mut current: Vec<usize> = (0..self.n_current).collect();
        current.shuffle(&mut self.current_rng);
        let mut pool: Vec<usize> = Vec::new();
        let per_batch = self.batch_size - self.slots;
        current
            .chunks(per_batch)
            .map(|chunk| {
                let mut replay = Vec::with_capacity(self.slots);
                while replay.len() < self.slots {
                    if pool.is_empty() {
                        pool = (0..self.n_replay).collect();
                        pool.shuffle(&mut self.replay_rng);
                        pool.reverse();
                    }
                    replay.push(pool.pop().expect("refilled"));
                }
                Batch {
                    current: chunk.to_vec(),
                    replay,
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn sched(n_cur: usize, n_rep: usize, b: usize, mix: f64) -> BatchScheduler {
        BatchScheduler::new(n_cur, n_rep, b, mix, substream(0, "batching", 0), substream(0, "batching", 1))
    }

    #[test]
    fn slot_counts() {
        assert_eq!(replay_slots(0.5, 32), 16);
        assert_eq!(replay_slots(0.25, 16), 4);
        assert_eq!(replay_slots(0.0, 16), 0);
        assert_eq!(replay_slots(1.0, 8), 7);
    }

    #[test]
    fn pure_current_without_replay() {
        let mut s = sched(10, 0, 4, 0.5);
        let e = s.next_epoch();
        assert_eq!(e.len(), 3);
        assert!(e.iter().all(|b| b.replay.is_empty()));
        let mut seen: Vec<usize> = e.iter().flat_map(|b| b.current.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn half_mix_splits_batches() {
        let mut s = sched(64, 100, 32, 0.5);
        for b in s.next_epoch() {
            assert_eq!(b.replay.len(), 16);
            assert_eq!(b.current.len(), 16);
        }
    }

    #[test]
    fn small_pool_fully_covered_each_epoch() {
        let mut s = sched(40, 7, 8, 0.25);
        for _ in 0..3 {
            let e = s.next_epoch();
            let drawn: Vec<usize> = e.iter().flat_map(|b| b.replay.clone()).collect();
            assert!(drawn.len() >= 7);
            for i in 0..7 {
                assert!(drawn.contains(&i));
            }
            // Within one pass through the pool there are no repeats.
            let mut first: Vec<usize> = drawn[..7].to_vec();
            first.sort_unstable();
            assert_eq!(first, (0..7).collect::<Vec<_>>());
        }
    }
}
