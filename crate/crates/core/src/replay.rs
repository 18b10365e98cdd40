//! Episode replay buffer with fixed-length subsequence sampling.
//!
//! Start points are drawn uniformly over all stored transitions. A
//! subsequence runs `L` transitions or until its episode ends; the
//! remainder is zero-padded and masked out.
//!
//! The buffer is plain data (`Send + Sync`); a rollout worker and a
//! trainer share it behind a single lock.

use std::collections::VecDeque;

use rand::Rng;

use crate::autodiff::{Checkpoint, Tensor};
use crate::error::{Error, Result};
use crate::trace::Episode;

pub const DEFAULT_CAPACITY: usize = 1_000_000;
pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_SEQ_LEN: usize = 64;

/// Where a batch row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Origin {
    pub episode_id: u64,
    pub start: usize,
    /// Unmasked transitions in the row.
    pub valid: usize,
}

/// Time-major block of `B` subsequences.
///
/// Position `k ∈ [0, L]` holds what the agent sees at `o_{s+k}`:
/// the observation, the previous action and reward, and the preceding
/// interval. Transition `k ∈ [0, L)` holds `a_{s+k}`, `r_{s+k}` and the
/// terminal flag of the step into `o_{s+k+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub obs: Vec<Tensor>,
    pub prev_action: Vec<Tensor>,
    pub prev_reward: Vec<Tensor>,
    pub dt: Vec<Vec<f64>>,
    pub action: Vec<Tensor>,
    pub reward: Vec<Tensor>,
    pub done: Vec<Tensor>,
    pub mask: Vec<Tensor>,
    pub origins: Vec<Origin>,
}

impl SequenceBatch {
    /// Builds a batch from explicit `(episode, start)` rows.
    pub fn assemble(rows: &[(&Episode, u64, usize)], seq_len: usize) -> Result<Self> {
        let Some((first, _, _)) = rows.first() else {
            return Err(Error::Replay("batch needs at least one row".into()));
        };
        if seq_len == 0 {
            return Err(Error::Replay("sequence length must be positive".into()));
        }
        let (od, ad) = (first.obs_dim(), first.action_dim());
        let b = rows.len();
        let mut origins = Vec::with_capacity(b);
        for &(ep, id, start) in rows {
            if ep.obs_dim() != od || ep.action_dim() != ad {
                return Err(Error::Replay(
                    "episodes in a batch must share dimensions".into(),
                ));
            }
            if start >= ep.len() {
                return Err(Error::Replay(format!(
                    "start {start} outside episode of length {}",
                    ep.len()
                )));
            }
            origins.push(Origin {
                episode_id: id,
                start,
                valid: seq_len.min(ep.len() - start),
            });
        }

        let mut batch = SequenceBatch {
            obs: Vec::with_capacity(seq_len + 1),
            prev_action: Vec::with_capacity(seq_len + 1),
            prev_reward: Vec::with_capacity(seq_len + 1),
            dt: Vec::with_capacity(seq_len + 1),
            action: Vec::with_capacity(seq_len),
            reward: Vec::with_capacity(seq_len),
            done: Vec::with_capacity(seq_len),
            mask: Vec::with_capacity(seq_len),
            origins,
        };
        for k in 0..=seq_len {
            let mut obs = vec![0.0; b * od];
            let mut prev_a = vec![0.0; b * ad];
            let mut prev_r = vec![0.0; b];
            let mut dt = vec![0.0; b];
            for (i, &(ep, _, start)) in rows.iter().enumerate() {
                let t = start + k;
                if t <= ep.len() {
                    obs[i * od..(i + 1) * od].copy_from_slice(ep.observation(t));
                    if t > 0 {
                        prev_a[i * ad..(i + 1) * ad].copy_from_slice(ep.action(t - 1));
                        prev_r[i] = ep.reward(t - 1);
                    }
                    dt[i] = ep.dt(t);
                } else {
                    // Padding still needs a valid interval for the solver.
                    dt[i] = ep.dt(ep.len());
                }
            }
            batch.obs.push(Tensor::new(vec![b, od], obs)?);
            batch.prev_action.push(Tensor::new(vec![b, ad], prev_a)?);
            batch.prev_reward.push(Tensor::new(vec![b, 1], prev_r)?);
            batch.dt.push(dt);
            if k == seq_len {
                break;
            }
            let mut a = vec![0.0; b * ad];
            let mut r = vec![0.0; b];
            let mut done = vec![0.0; b];
            let mut mask = vec![0.0; b];
            for (i, &(ep, _, start)) in rows.iter().enumerate() {
                let t = start + k;
                if t < ep.len() {
                    a[i * ad..(i + 1) * ad].copy_from_slice(ep.action(t));
                    r[i] = ep.reward(t);
                    done[i] = f64::from(u8::from(ep.done(t)));
                    mask[i] = 1.0;
                }
            }
            batch.action.push(Tensor::new(vec![b, ad], a)?);
            batch.reward.push(Tensor::new(vec![b, 1], r)?);
            batch.done.push(Tensor::new(vec![b, 1], done)?);
            batch.mask.push(Tensor::new(vec![b, 1], mask)?);
        }
        Ok(batch)
    }

    pub fn batch_size(&self) -> usize {
        self.origins.len()
    }

    /// Number of transitions per row, `L`.
    pub fn seq_len(&self) -> usize {
        self.action.len()
    }

    pub fn valid_steps(&self) -> usize {
        self.origins.iter().map(|o| o.valid).sum()
    }

    /// The first `len` transitions of every row.
    pub fn prefix(&self, len: usize) -> Result<Self> {
        if len == 0 || len > self.seq_len() {
            return Err(Error::Replay(format!(
                "prefix length {len} outside 1..={}",
                self.seq_len()
            )));
        }
        Ok(Self {
            obs: self.obs[..=len].to_vec(),
            prev_action: self.prev_action[..=len].to_vec(),
            prev_reward: self.prev_reward[..=len].to_vec(),
            dt: self.dt[..=len].to_vec(),
            action: self.action[..len].to_vec(),
            reward: self.reward[..len].to_vec(),
            done: self.done[..len].to_vec(),
            mask: self.mask[..len].to_vec(),
            origins: self
                .origins
                .iter()
                .map(|o| Origin {
                    valid: o.valid.min(len),
                    ..*o
                })
                .collect(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<(u64, Episode)>,
    /// Cumulative transition counts, `offsets[i]` = transitions before episode `i`.
    offsets: Vec<usize>,
    transitions: usize,
    next_id: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            episodes: VecDeque::new(),
            offsets: Vec::new(),
            transitions: 0,
            next_id: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn transitions(&self) -> usize {
        self.transitions
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn episodes(&self) -> impl Iterator<Item = (u64, &Episode)> {
        self.episodes.iter().map(|(id, e)| (*id, e))
    }

    pub fn episode(&self, id: u64) -> Option<&Episode> {
        self.episodes.iter().find(|(i, _)| *i == id).map(|(_, e)| e)
    }

    /// Stores an episode and returns its id. Oldest episodes are evicted
    /// while the count exceeds capacity, so the count stays within capacity
    /// unless the newest episode alone is larger.
    pub fn push_episode(&mut self, episode: Episode) -> Result<u64> {
        if episode.is_empty() {
            return Err(Error::Replay("cannot store an empty episode".into()));
        }
        if let Some((_, first)) = self.episodes.front() {
            if first.obs_dim() != episode.obs_dim() || first.action_dim() != episode.action_dim() {
                return Err(Error::Replay(
                    "episode dimensions differ from the buffer's".into(),
                ));
            }
        }
        let id = self.next_id;
        self.next_id += 1;
        self.transitions += episode.len();
        self.episodes.push_back((id, episode));
        while self.transitions > self.capacity && self.episodes.len() > 1 {
            let (_, old) = self.episodes.pop_front().expect("non-empty");
            self.transitions -= old.len();
        }
        self.rebuild_offsets();
        Ok(id)
    }

    fn rebuild_offsets(&mut self) {
        self.offsets.clear();
        let mut acc = 0;
        for (_, e) in &self.episodes {
            self.offsets.push(acc);
            acc += e.len();
        }
    }

    /// Maps a global transition index to `(episode slot, step)`.
    fn locate(&self, index: usize) -> (usize, usize) {
        let slot = self.offsets.partition_point(|&o| o <= index) - 1;
        (slot, index - self.offsets[slot])
    }

    pub fn sample_batch(
        &self,
        rng: &mut impl Rng,
        batch_size: usize,
        seq_len: usize,
    ) -> Result<SequenceBatch> {
        if self.is_empty() {
            return Err(Error::Replay("cannot sample from an empty buffer".into()));
        }
        if batch_size == 0 {
            return Err(Error::Replay("batch size must be positive".into()));
        }
        let rows: Vec<(&Episode, u64, usize)> = (0..batch_size)
            .map(|_| {
                let (slot, start) = self.locate(rng.random_range(0..self.transitions));
                let (id, ep) = &self.episodes[slot];
                (ep, *id, start)
            })
            .collect();
        SequenceBatch::assemble(&rows, seq_len)
    }

    /// Writes all episodes under `prefix` in the checkpoint container.
    pub fn snapshot(&self, ckpt: &mut Checkpoint, prefix: &str) {
        let (od, ad) = self
            .episodes
            .front()
            .map_or((0, 0), |(_, e)| (e.obs_dim(), e.action_dim()));
        let mut header = vec![
            self.capacity as f64,
            self.next_id as f64,
            od as f64,
            ad as f64,
        ];
        let mut obs = Vec::new();
        let mut act = Vec::new();
        let mut rew = Vec::new();
        let mut dts = Vec::new();
        for (id, e) in &self.episodes {
            header.extend([
                *id as f64,
                e.len() as f64,
                f64::from(u8::from(e.terminal())),
            ]);
            obs.extend_from_slice(e.observations());
            act.extend_from_slice(e.actions());
            rew.extend_from_slice(e.rewards());
            dts.extend_from_slice(e.dts());
        }
        let vec1 = |v: Vec<f64>| Tensor::new(vec![v.len()], v).expect("1-d");
        ckpt.insert(format!("{prefix}/header"), vec1(header));
        ckpt.insert(format!("{prefix}/observations"), vec1(obs));
        ckpt.insert(format!("{prefix}/actions"), vec1(act));
        ckpt.insert(format!("{prefix}/rewards"), vec1(rew));
        ckpt.insert(format!("{prefix}/dts"), vec1(dts));
    }

    pub fn restore(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let header = ckpt.require(&format!("{prefix}/header"))?.data();
        let obs = ckpt.require(&format!("{prefix}/observations"))?.data();
        let act = ckpt.require(&format!("{prefix}/actions"))?.data();
        let rew = ckpt.require(&format!("{prefix}/rewards"))?.data();
        let dts = ckpt.require(&format!("{prefix}/dts"))?.data();
        if header.len() < 4 || (header.len() - 4) % 3 != 0 {
            return Err(Error::Checkpoint("malformed replay header".into()));
        }
        let (od, ad) = (header[2] as usize, header[3] as usize);
        let mut buf = ReplayBuffer::new(header[0] as usize);
        buf.next_id = header[1] as u64;
        let (mut oo, mut ao, mut ro, mut dto) = (0, 0, 0, 0);
        for chunk in header[4..].chunks(3) {
            let (id, len, terminal) = (chunk[0] as u64, chunk[1] as usize, chunk[2] != 0.0);
            let take = |src: &[f64], at: &mut usize, n: usize| -> Result<Vec<f64>> {
                let v = src
                    .get(*at..*at + n)
                    .ok_or_else(|| Error::Checkpoint("truncated replay snapshot".into()))?
                    .to_vec();
                *at += n;
                Ok(v)
            };
            let ep = Episode::from_parts(
                od,
                ad,
                take(obs, &mut oo, (len + 1) * od)?,
                take(act, &mut ao, len * ad)?,
                take(rew, &mut ro, len)?,
                take(dts, &mut dto, len + 1)?,
                terminal,
            )?;
            buf.transitions += ep.len();
            buf.episodes.push_back((id, ep));
        }
        buf.rebuild_offsets();
        Ok(buf)
    }
}

impl Default for ReplayBuffer {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Episode whose observation at step t is `base + t`.
    fn ramp(base: f64, len: usize) -> Episode {
        let obs: Vec<f64> = (0..=len).map(|t| base + t as f64).collect();
        let act: Vec<f64> = (0..len).map(|t| -(base + t as f64)).collect();
        let rew: Vec<f64> = (0..len).map(|t| 0.5 * (base + t as f64)).collect();
        Episode::from_parts(1, 1, obs, act, rew, vec![0.05; len + 1], true).unwrap()
    }

    #[test]
    fn bookkeeping_and_eviction() {
        let mut buf = ReplayBuffer::new(DEFAULT_CAPACITY);
        for i in 0..3 {
            buf.push_episode(ramp(i as f64 * 1000.0, 200)).unwrap();
        }
        assert_eq!(buf.transitions(), 600);
        let mut small = ReplayBuffer::new(500);
        for i in 0..3 {
            small.push_episode(ramp(i as f64 * 1000.0, 200)).unwrap();
        }
        assert_eq!(small.transitions(), 400);
        assert!(small.episode(0).is_none());
        assert_eq!(small.episode(2), Some(&ramp(2000.0, 200)));
    }

    #[test]
    fn empty_inputs_are_errors() {
        let mut buf = ReplayBuffer::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(buf.sample_batch(&mut rng, 4, 4).is_err());
        let empty =
            Episode::from_parts(1, 1, vec![0.0], vec![], vec![], vec![0.05], false).unwrap();
        assert!(buf.push_episode(empty).is_err());
    }

    #[test]
    fn short_episode_is_padded() {
        let mut buf = ReplayBuffer::new(100);
        buf.push_episode(ramp(0.0, 10)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = loop {
            let b = buf.sample_batch(&mut rng, 1, 64).unwrap();
            if b.origins[0].start == 0 {
                break b;
            }
        };
        let valid: f64 = batch.mask.iter().map(|m| m.data()[0]).sum();
        assert_eq!(valid, 10.0);
        assert_eq!(batch.seq_len(), 64);
        assert_eq!(batch.obs.len(), 65);
        assert_eq!(batch.obs[10].data(), &[10.0]);
        assert_eq!(batch.obs[11].data(), &[0.0]);
        assert_eq!(batch.done[9].data(), &[1.0]);
        assert!(batch.dt.iter().all(|d| d[0] > 0.0));
    }

    #[test]
    fn snapshot_round_trips() {
        let mut buf = ReplayBuffer::new(1000);
        buf.push_episode(ramp(0.0, 7)).unwrap();
        buf.push_episode(ramp(100.0, 3)).unwrap();
        let mut ckpt = Checkpoint::new();
        buf.snapshot(&mut ckpt, "replay");
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        let restored = ReplayBuffer::restore(&back, "replay").unwrap();
        assert_eq!(restored.transitions(), 10);
        let a: Vec<_> = buf.episodes().collect();
        let b: Vec<_> = restored.episodes().collect();
        assert_eq!(a, b);
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(
            buf.sample_batch(&mut r1, 8, 5).unwrap(),
            restored.sample_batch(&mut r2, 8, 5).unwrap()
        );
    }

    #[test]
    fn prefix_matches_shorter_assembly() {
        let ep = ramp(0.0, 20);
        let long = SequenceBatch::assemble(&[(&ep, 0, 15)], 16).unwrap();
        let short = SequenceBatch::assemble(&[(&ep, 0, 15)], 5).unwrap();
        assert_eq!(long.prefix(5).unwrap(), short);
    }
}
