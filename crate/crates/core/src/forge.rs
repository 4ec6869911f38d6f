//! Negative trajectory generation: frame shuffles and fine-grained mask
//! replacement `v+ * (1 - M) + x_r * M`.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::world::{Frame, Instruction, RoomId, TokenId, Trajectory, World};

/// Fixed-cardinality set of frame positions to replace.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Mask {
    /// Sorted, distinct positions in `[0, traj_len)`.
    indices: Vec<usize>,
    traj_len: usize,
}

impl Mask {
    pub fn new(traj_len: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() || indices.len() >= traj_len {
            return Err(Error::Usage(format!(
                "mask must replace between 1 and {} of {traj_len} frames, got {}",
                traj_len.saturating_sub(1),
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= traj_len) {
            return Err(Error::Usage(format!("mask index {bad} outside trajectory of length {traj_len}")));
        }
        Ok(Self { indices, traj_len })
    }

    pub fn from_binary(bits: &[bool]) -> Result<Self> {
        let idx = bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
        Self::new(bits.len(), idx)
    }

    pub fn to_binary(&self) -> Vec<bool> {
        let mut bits = vec![false; self.traj_len];
        for &i in &self.indices {
            bits[i] = true;
        }
        bits
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn n_rep(&self) -> usize {
        self.indices.len()
    }

    pub fn traj_len(&self) -> usize {
        self.traj_len
    }

    pub fn contains(&self, k: usize) -> bool {
        self.indices.binary_search(&k).is_ok()
    }
}

/// Every mask of cardinality `n_rep` over `traj_len` frames, in lexicographic order.
pub fn all_masks(traj_len: usize, n_rep: usize) -> Result<Vec<Mask>> {
    if n_rep == 0 || n_rep >= traj_len {
        return Err(Error::Usage(format!("n_rep must lie in [1, {})", traj_len)));
    }
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..n_rep).collect();
    loop {
        out.push(Mask { indices: idx.clone(), traj_len });
        let Some(pos) = (0..n_rep).rev().find(|&i| idx[i] < traj_len - n_rep + i) else {
            return Ok(out);
        };
        idx[pos] += 1;
        for j in pos + 1..n_rep {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplacementMode {
    /// From another room of the positive's own house.
    InDomain,
    /// From a room of a different house in the same split whose type the
    /// positive path never visits.
    OutDomain,
}

impl std::str::FromStr for ReplacementMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in" | "in_domain" | "in-domain" => Ok(Self::InDomain),
            "out" | "out_domain" | "out-domain" => Ok(Self::OutDomain),
            _ => Err(Error::config("replacement", format!("unknown mode `{s}` (in|out)"))),
        }
    }
}

impl std::fmt::Display for ReplacementMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::InDomain => "in",
            Self::OutDomain => "out",
        })
    }
}

/// A replacement frame together with the room it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct Replacement {
    pub room: RoomId,
    pub frame: Frame,
}

/// Draws one replacement per listed slot, independently.
pub fn draw_replacements(
    world: &World,
    v_pos: &Trajectory,
    mode: ReplacementMode,
    slots: &[usize],
    rng: &mut Rng,
) -> Result<Vec<Replacement>> {
    let house = v_pos.house_id;
    // out-domain rooms come from other houses and never share an
    // instruction token with a room the positive visits
    let foreign: Vec<RoomId> = match mode {
        ReplacementMode::OutDomain => {
            let visited: Vec<TokenId> = v_pos.room_sequence.iter().map(|&r| world.room_tokens[r as usize]).collect();
            let pool: Vec<RoomId> = world
                .houses(world.split_of(house))
                .iter()
                .filter(|&&h| h != house)
                .flat_map(|&h| world.rooms_of(h))
                .filter(|&r| !visited.contains(&world.room_tokens[r as usize]))
                .collect();
            if pool.is_empty() {
                return Err(Error::config(
                    "replacement",
                    "out-domain replacement needs another house in the split with a room type the path does not visit",
                ));
            }
            pool
        }
        ReplacementMode::InDomain => {
            if world.config.rooms_per_house < 2 {
                return Err(Error::config(
                    "replacement",
                    "in-domain replacement needs at least 2 rooms per house",
                ));
            }
            Vec::new()
        }
    };

    slots
        .iter()
        .map(|&k| {
            let orig = *v_pos
                .room_sequence
                .get(k)
                .ok_or_else(|| Error::Usage(format!("slot {k} outside trajectory")))?;
            let room = match mode {
                ReplacementMode::InDomain => {
                    let rooms = world.rooms_of(house);
                    let n = rooms.len() as u32;
                    let own = world.rooms_of(world.house_of(orig));
                    if own == rooms {
                        rooms.start + (orig - rooms.start + rng.random_range(1..n)) % n
                    } else {
                        rng.random_range(rooms)
                    }
                }
                ReplacementMode::OutDomain => foreign[rng.random_range(0..foreign.len())],
            };
            Ok(Replacement {
                room,
                frame: world.sample_frame(room, rng),
            })
        })
        .collect()
}

/// One replacement for every frame position (the full `x_r`); masks pick
/// from it with [`select`].
pub fn draw_replacement_pool(world: &World, v_pos: &Trajectory, mode: ReplacementMode, rng: &mut Rng) -> Result<Vec<Replacement>> {
    let slots: Vec<usize> = (0..v_pos.len()).collect();
    draw_replacements(world, v_pos, mode, &slots, rng)
}

/// The entries of a full-length replacement pool at the masked positions.
pub fn select(pool: &[Replacement], mask: &Mask) -> Vec<Replacement> {
    mask.indices().iter().map(|&k| pool[k].clone()).collect()
}

/// Replaces the masked frames of `v_pos`; `replacements[i]` fills the i-th
/// masked position in ascending order.
pub fn apply_mask(v_pos: &Trajectory, mask: &Mask, replacements: &[Replacement]) -> Result<Trajectory> {
    if mask.traj_len() != v_pos.len() {
        return Err(Error::Usage(format!(
            "mask built for {} frames applied to a trajectory of {}",
            mask.traj_len(),
            v_pos.len()
        )));
    }
    if replacements.len() != mask.n_rep() {
        return Err(Error::Usage(format!(
            "mask replaces {} frames but {} replacements were given",
            mask.n_rep(),
            replacements.len()
        )));
    }
    let mut out = v_pos.clone();
    for (&k, r) in mask.indices().iter().zip(replacements) {
        out.frames[k] = r.frame.clone();
        out.room_sequence[k] = r.room;
    }
    Ok(out)
}

/// A fine-grained negative trajectory paired with the positive instruction.
pub fn make_fgn_pair(
    v_pos: &Trajectory,
    instr_pos: &Instruction,
    mask: &Mask,
    replacements: &[Replacement],
) -> Result<(Trajectory, Instruction)> {
    Ok((apply_mask(v_pos, mask, replacements)?, instr_pos.clone()))
}

/// A uniformly random non-identity permutation of the frames. With
/// `resample`, one position additionally gets a fresh frame from a different
/// room of the same house, so the result stays distinguishable under
/// order-invariant pooling.
pub fn shuffle_negative(world: &World, v_pos: &Trajectory, resample: bool, rng: &mut Rng) -> Result<Trajectory> {
    let k = v_pos.len();
    if k < 2 {
        return Err(Error::Usage("shuffling needs at least 2 frames".into()));
    }
    let identity: Vec<usize> = (0..k).collect();
    let mut perm = identity.clone();
    while perm == identity {
        perm.shuffle(rng);
    }
    let mut out = Trajectory {
        frames: perm.iter().map(|&i| v_pos.frames[i].clone()).collect(),
        room_sequence: perm.iter().map(|&i| v_pos.room_sequence[i]).collect(),
        house_id: v_pos.house_id,
    };
    if resample {
        let slot = rng.random_range(0..k);
        let r = draw_replacements(world, &out, ReplacementMode::InDomain, &[slot], rng)?;
        out.frames[slot] = r[0].frame.clone();
        out.room_sequence[slot] = r[0].room;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::world::{dataset, generate_world, Split, WorldConfig};

    fn world() -> World {
        generate_world(&WorldConfig {
            n_houses_seen: 3,
            n_houses_unseen: 2,
            vocab_size: 40,
            seed: 5,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    fn positive(w: &World, i: u64) -> (Trajectory, Instruction) {
        let ep = dataset(w, Split::Seen, 1, 1, i).unwrap().remove(0);
        (ep.positive, ep.instruction)
    }

    #[test]
    fn mask_validation() {
        assert!(Mask::new(4, vec![]).is_err());
        assert!(Mask::new(4, vec![0, 1, 2, 3]).is_err());
        assert!(Mask::new(4, vec![4]).is_err());
        let m = Mask::from_binary(&[false, true, false, true]).unwrap();
        assert_eq!(m.indices(), &[1, 3]);
        assert_eq!(m.to_binary(), vec![false, true, false, true]);
    }

    #[test]
    fn all_masks_counts() {
        assert_eq!(all_masks(4, 1).unwrap().len(), 4);
        assert_eq!(all_masks(4, 2).unwrap().len(), 6);
        assert_eq!(all_masks(8, 3).unwrap().len(), 56);
        assert_eq!(all_masks(4, 2).unwrap()[0].indices(), &[0, 1]);
        assert!(all_masks(4, 4).is_err());
    }

    #[test]
    fn single_slot_mask_replaces_first_frame() {
        let w = world();
        let (v, _) = positive(&w, 1);
        let mut r = rng::stream(1, &[]);
        let m = Mask::new(v.len(), vec![0]).unwrap();
        let rep = draw_replacements(&w, &v, ReplacementMode::OutDomain, &[0], &mut r).unwrap();
        let out = apply_mask(&v, &m, &rep).unwrap();
        assert_eq!(out.frames[0], rep[0].frame);
        assert_eq!(out.frames[1..], v.frames[1..]);
        assert_eq!(out.house_id, v.house_id);
        assert_eq!(out.room_sequence[0], rep[0].room);
    }

    #[test]
    fn replacing_with_originals_is_identity() {
        let w = world();
        let (v, _) = positive(&w, 2);
        let m = Mask::new(v.len(), vec![2, 5]).unwrap();
        let reps: Vec<Replacement> = m
            .indices()
            .iter()
            .map(|&k| Replacement { room: v.room_sequence[k], frame: v.frames[k].clone() })
            .collect();
        assert_eq!(apply_mask(&v, &m, &reps).unwrap(), v);
    }

    #[test]
    fn maximal_mask_keeps_one_frame() {
        let w = world();
        let (v, _) = positive(&w, 3);
        let k = v.len();
        let m = Mask::new(k, (0..k).filter(|&i| i != 4).collect()).unwrap();
        let mut r = rng::stream(3, &[]);
        let reps = draw_replacements(&w, &v, ReplacementMode::OutDomain, m.indices(), &mut r).unwrap();
        let out = apply_mask(&v, &m, &reps).unwrap();
        let kept: Vec<usize> = (0..k).filter(|&i| out.frames[i] == v.frames[i]).collect();
        assert_eq!(kept, vec![4]);
    }

    #[test]
    fn cardinality_mismatch_is_usage_error() {
        let w = world();
        let (v, _) = positive(&w, 4);
        let m = Mask::new(v.len(), vec![1, 2]).unwrap();
        let one = vec![Replacement { room: 0, frame: v.frames[0].clone() }];
        assert!(matches!(apply_mask(&v, &m, &one), Err(Error::Usage(_))));
    }

    #[test]
    fn replacement_sources_respect_partition() {
        let w = world();
        let mut r = rng::stream(6, &[]);
        for i in 0..50 {
            let (v, _) = positive(&w, 100 + i);
            let slots: Vec<usize> = (0..v.len()).collect();
            let out = draw_replacements(&w, &v, ReplacementMode::OutDomain, &slots, &mut r).unwrap();
            for rep in &out {
                let h = w.house_of(rep.room);
                assert_ne!(h, v.house_id);
                assert_eq!(w.split_of(h), Split::Seen);
            }
            let inn = draw_replacements(&w, &v, ReplacementMode::InDomain, &slots, &mut r).unwrap();
            for (k, rep) in inn.iter().enumerate() {
                assert_eq!(w.house_of(rep.room), v.house_id);
                assert_ne!(rep.room, v.room_sequence[k]);
            }
        }
    }

    #[test]
    fn zero_noise_replacement_is_a_room_center() {
        let w = generate_world(&WorldConfig {
            frame_noise_sigma: 0.0,
            ..w_cfg()
        })
        .unwrap();
        let (v, _) = positive(&w, 7);
        let mut r = rng::stream(7, &[]);
        let rep = draw_replacements(&w, &v, ReplacementMode::InDomain, &[3], &mut r).unwrap();
        assert_eq!(rep[0].frame.features, w.room_centers[rep[0].room as usize]);
    }

    fn w_cfg() -> WorldConfig {
        world().config
    }

    #[test]
    fn out_domain_needs_two_houses() {
        let w = generate_world(&WorldConfig {
            n_houses_seen: 1,
            ..w_cfg()
        })
        .unwrap();
        let (v, _) = positive(&w, 8);
        let mut r = rng::stream(8, &[]);
        let err = draw_replacements(&w, &v, ReplacementMode::OutDomain, &[0], &mut r).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn shuffle_of_two_frames_swaps() {
        let w = generate_world(&WorldConfig { traj_len: 2, ..w_cfg() }).unwrap();
        let (v, _) = positive(&w, 9);
        let mut r = rng::stream(9, &[]);
        for _ in 0..20 {
            let s = shuffle_negative(&w, &v, false, &mut r).unwrap();
            assert_eq!(s.frames, vec![v.frames[1].clone(), v.frames[0].clone()]);
        }
    }

    #[test]
    fn shuffle_preserves_frame_multiset_without_resample() {
        let w = world();
        let (v, _) = positive(&w, 10);
        let mut r = rng::stream(10, &[]);
        let s = shuffle_negative(&w, &v, false, &mut r).unwrap();
        let key = |t: &Trajectory| {
            let mut f: Vec<String> = t.frames.iter().map(|f| format!("{:?}", f.features)).collect();
            f.sort();
            f
        };
        assert_eq!(key(&s), key(&v));
        let resampled = shuffle_negative(&w, &v, true, &mut r).unwrap();
        assert_ne!(key(&resampled), key(&v));
    }

    #[test]
    fn shuffle_never_returns_identity() {
        let w = generate_world(&WorldConfig { traj_len: 4, ..w_cfg() }).unwrap();
        let (v, _) = positive(&w, 11);
        let mut r = rng::stream(11, &[]);
        let identities = (0..10_000)
            .filter(|_| shuffle_negative(&w, &v, false, &mut r).unwrap().frames == v.frames)
            .count();
        assert_eq!(identities, 0);
    }

    #[test]
    fn fine_grained_pairs_differ_in_exactly_n_rep_frames() {
        let w = world();
        let (v, instr) = positive(&w, 12);
        let mut r = rng::stream(12, &[]);
        for n_rep in 1..v.len() {
            let m = Mask::new(v.len(), (0..n_rep).collect()).unwrap();
            let reps = draw_replacements(&w, &v, ReplacementMode::OutDomain, m.indices(), &mut r).unwrap();
            let (neg, ni) = make_fgn_pair(&v, &instr, &m, &reps).unwrap();
            assert_eq!(ni, instr);
            assert_eq!(neg.len(), v.len());
            assert_eq!(neg.frame_hamming(&v), n_rep);
        }
    }

    #[test]
    fn shuffle_hamming_matches_permutation_expectation() {
        // Oracle: exact expected number of moved positions over all
        // non-identity permutations of K items, by enumeration.
        fn permutations(k: usize) -> Vec<Vec<usize>> {
            if k == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for p in permutations(k - 1) {
                for pos in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(pos, k - 1);
                    out.push(q);
                }
            }
            out
        }
        let k = 5;
        let perms: Vec<_> = permutations(k)
            .into_iter()
            .filter(|p| p.iter().enumerate().any(|(i, &x)| i != x))
            .collect();
        let expected = perms
            .iter()
            .map(|p| p.iter().enumerate().filter(|(i, &x)| *i != x).count() as f64)
            .sum::<f64>()
            / perms.len() as f64;
        // close to K(1 - 1/K) for uniform permutations
        assert!((expected - (k as f64 - 1.0)).abs() < 0.05);

        let w = generate_world(&WorldConfig { traj_len: k, ..w_cfg() }).unwrap();
        let (v, _) = positive(&w, 13);
        let mut r = rng::stream(13, &[]);
        let n = 20_000;
        let mean = (0..n)
            .map(|_| shuffle_negative(&w, &v, false, &mut r).unwrap().frame_hamming(&v) as f64)
            .sum::<f64>()
            / n as f64;
        assert!((mean - expected).abs() < 0.05, "{mean} vs {expected}");
        // fine-grained negatives move exactly n_rep = 1 frame
        assert!(mean > 1.0 + 2.5);
    }
}
