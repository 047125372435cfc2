//! Class-balanced window sampling: five windows inside every phase that
//! occurs in a video plus one window around every phase transition.

use rand::Rng;

use super::transitions;
use crate::error::{Result, TunesError};

pub const WINDOWS_PER_PHASE: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowKind {
    /// Window containing a frame of this phase.
    Phase(u8),
    /// Window centred on the transition at this frame.
    Transition(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub len: usize,
    pub kind: WindowKind,
}

impl Window {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Samples windows of length `len` from one labelled video.
pub fn balanced_sample_windows<R: Rng + ?Sized>(labels: &[u8], len: usize, rng: &mut R) -> Result<Vec<Window>> {
    let total = labels.len();
    if len == 0 || total < len {
        return Err(TunesError::param(format!(
            "cannot cut windows of {len} frames from {total} frames"
        )));
    }
    let last_start = total - len;
    let mut phases: Vec<u8> = labels.to_vec();
    phases.sort_unstable();
    phases.dedup();

    let mut windows = Vec::with_capacity(phases.len() * WINDOWS_PER_PHASE);
    for &phase in &phases {
        let frames: Vec<usize> = (0..total).filter(|&t| labels[t] == phase).collect();
        for _ in 0..WINDOWS_PER_PHASE {
            let anchor = frames[rng.gen_range(0..frames.len())];
            let lo = anchor.saturating_sub(len - 1);
            let hi = anchor.min(last_start);
            windows.push(Window {
                start: rng.gen_range(lo..=hi),
                len,
                kind: WindowKind::Phase(phase),
            });
        }
    }
    for t in transitions(labels) {
        windows.push(Window {
            start: t.saturating_sub(len / 2).min(last_start),
            len,
            kind: WindowKind::Transition(t),
        });
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn staircase(phases: u8, each: usize) -> Vec<u8> {
        (1..=phases).flat_map(|p| std::iter::repeat(p).take(each)).collect()
    }

    #[test]
    fn seven_phases_give_41_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = balanced_sample_windows(&staircase(7, 30), 40, &mut rng).unwrap();
        assert_eq!(w.len(), 41);
        assert!(w.iter().all(|w| w.len == 40 && w.end() <= 210));
    }

    #[test]
    fn single_phase_gives_five() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = balanced_sample_windows(&[3; 50], 50, &mut rng).unwrap();
        assert_eq!(w.len(), 5);
        assert!(w.iter().all(|w| w.start == 0));
    }

    #[test]
    fn phase_windows_contain_their_phase() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let labels = staircase(4, 25);
        for w in balanced_sample_windows(&labels, 10, &mut rng).unwrap() {
            match w.kind {
                WindowKind::Phase(p) => assert!(labels[w.start..w.end()].contains(&p)),
                WindowKind::Transition(t) => assert!(w.start < t && t < w.end()),
            }
        }
    }

    #[test]
    fn transition_windows_clamp_at_ends() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels = [1, 2, 2, 2, 2, 2, 2, 2, 2, 3];
        let w = balanced_sample_windows(&labels, 6, &mut rng).unwrap();
        let starts: Vec<usize> = w
            .iter()
            .filter(|w| matches!(w.kind, WindowKind::Transition(_)))
            .map(|w| w.start)
            .collect();
        assert_eq!(starts, vec![0, 4]);
    }

    #[test]
    fn too_short_video_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(balanced_sample_windows(&[1; 5], 6, &mut rng).is_err());
        assert!(balanced_sample_windows(&[1; 5], 0, &mut rng).is_err());
    }
}
