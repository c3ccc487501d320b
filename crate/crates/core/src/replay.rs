//! Uniform ring-buffer replay memory.

use std::io::Write;

use rand::Rng;

use crate::error::{shape_err, Error, Result};

pub const DEFAULT_CAPACITY: usize = 3_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    /// Already multiplied by the reward scale.
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    state_dim: usize,
    action_dim: usize,
    items: Vec<Transition>,
    /// Slot the next push writes to once the buffer is full.
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, state_dim: usize, action_dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            state_dim,
            action_dim,
            items: Vec::new(),
            cursor: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stores a transition, overwriting the oldest one when full.
    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.state.len() != self.state_dim || t.next_state.len() != self.state_dim || t.action.len() != self.action_dim {
            return shape_err(format!(
                "transition dims ({}, {}, {}) do not match buffer ({}, {})",
                t.state.len(),
                t.action.len(),
                t.next_state.len(),
                self.state_dim,
                self.action_dim
            ));
        }
        if t.terminal && t.truncated {
            return Err(Error::Precondition("transition cannot be both terminal and truncated".into()));
        }
        let finite = t.reward.is_finite()
            && t.state.iter().chain(&t.action).chain(&t.next_state).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numeric("transition holds a non-finite entry".into()));
        }
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        Ok(())
    }

    /// Indices drawn i.i.d. uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.items.len() < n || n == 0 {
            return Err(Error::Precondition(format!(
                "cannot draw a minibatch of {n} from {} stored transitions",
                self.items.len()
            )));
        }
        let len = self.items.len();
        Ok((0..n).map(|_| rng.random_range(0..len)).collect())
    }

    pub fn sample_minibatch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        Ok(self.sample_indices(n, rng)?.into_iter().map(|i| &self.items[i]).collect())
    }

    /// Contents from oldest to newest.
    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &Transition> {
        let (newer, older) = self.items.split_at(self.cursor);
        older.iter().chain(newer.iter())
    }

    /// CSV export: `state_*, action_*, reward, next_state_*, terminal, truncated`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.state_dim).map(|i| format!("state_{i}")).collect();
        header.extend((0..self.action_dim).map(|i| format!("action_{i}")));
        header.push("reward".into());
        header.extend((0..self.state_dim).map(|i| format!("next_state_{i}")));
        header.push("terminal".into());
        header.push("truncated".into());
        w.write_record(&header)?;
        for t in self.iter_oldest_first() {
            let mut row: Vec<String> = t.state.iter().map(f64::to_string).collect();
            row.extend(t.action.iter().map(f64::to_string));
            row.push(t.reward.to_string());
            row.extend(t.next_state.iter().map(f64::to_string));
            row.push(t.terminal.to_string());
            row.push(t.truncated.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn item(tag: f64) -> Transition {
        Transition {
            state: vec![tag],
            action: vec![0.0],
            reward: tag,
            next_state: vec![tag + 1.0],
            terminal: false,
            truncated: false,
        }
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut b = ReplayBuffer::new(2, 1, 1).unwrap();
        for k in 1..=3 {
            b.push(item(k as f64)).unwrap();
        }
        let tags: Vec<f64> = b.iter_oldest_first().map(|t| t.reward).collect();
        assert_eq!(tags, vec![2.0, 3.0]);
    }

    #[test]
    fn single_item_is_sampled() {
        let mut b = ReplayBuffer::new(4, 1, 1).unwrap();
        b.push(item(7.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(b.sample_minibatch(1, &mut rng).unwrap()[0], &item(7.0));
    }

    #[test]
    fn rejects_bad_transitions() {
        let mut b = ReplayBuffer::new(4, 1, 1).unwrap();
        let mut t = item(0.0);
        t.reward = f64::NAN;
        assert!(matches!(b.push(t), Err(Error::Numeric(_))));
        let mut t = item(0.0);
        t.state = vec![0.0, 1.0];
        assert!(matches!(b.push(t), Err(Error::Shape(_))));
        let mut t = item(0.0);
        t.terminal = true;
        t.truncated = true;
        assert!(matches!(b.push(t), Err(Error::Precondition(_))));
        assert!(b.is_empty());
    }

    #[test]
    fn underfull_buffer_refuses_minibatch() {
        let mut b = ReplayBuffer::new(4, 1, 1).unwrap();
        b.push(item(1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(b.sample_minibatch(2, &mut rng), Err(Error::Precondition(_))));
    }

    #[test]
    fn seeded_indices_repeat() {
        let mut b = ReplayBuffer::new(10, 1, 1).unwrap();
        for k in 0..10 {
            b.push(item(k as f64)).unwrap();
        }
        let a = b.sample_indices(10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let c = b.sample_indices(10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn uniform_frequencies_pass_chi_square() {
        let mut b = ReplayBuffer::new(10, 1, 1).unwrap();
        for k in 0..10 {
            b.push(item(k as f64)).unwrap();
        }
        let draws = 100_000;
        let mut counts = [0usize; 10];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..draws / 10 {
            for i in b.sample_indices(10, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        let expected = draws as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 9 degrees of freedom: P(chi2 > 27.88) = 0.001
        assert!(chi2 < 27.88, "chi2 = {chi2}");
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let mut b = ReplayBuffer::new(3, 1, 1).unwrap();
        b.push(item(1.0)).unwrap();
        let mut out = Vec::new();
        b.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "state_0,action_0,reward,next_state_0,terminal,truncated");
        assert_eq!(lines.next().unwrap(), "1,0,1,2,false,false");
    }

    proptest! {
        #[test]
        fn ring_matches_list_model(capacity in 1usize..8, pushes in 0usize..40) {
            let mut b = ReplayBuffer::new(capacity, 1, 1).unwrap();
            let mut model: Vec<f64> = Vec::new();
            for k in 0..pushes {
                b.push(item(k as f64)).unwrap();
                model.push(k as f64);
                if model.len() > capacity {
                    model.remove(0);
                }
                let got: Vec<f64> = b.iter_oldest_first().map(|t| t.reward).collect();
                prop_assert_eq!(&got, &model);
                prop_assert!(b.len() <= capacity);
            }
        }
    }
}
