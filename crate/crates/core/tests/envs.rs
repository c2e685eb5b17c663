//! Environment dynamics against exhaustive oracles on the small grid.

use lorasa::envs::{Env, EnvConfig, Environment, GridWorld, Spread};
use lorasa::nn::Action;
use lorasa::numerics::RngStream;

const SIZE: usize = 5;
const LIMIT: usize = 12;
const CELLS: usize = SIZE * SIZE;

type Cell = (usize, usize);

fn step_cell((x, y): Cell, a: usize) -> Cell {
    match a {
        0 if y + 1 < SIZE => (x, y + 1),
        1 if y > 0 => (x, y - 1),
        2 if x > 0 => (x - 1, y),
        3 if x + 1 < SIZE => (x + 1, y),
        _ => (x, y),
    }
}

fn idx((x, y): Cell) -> usize {
    y * SIZE + x
}

fn cell(i: usize) -> Cell {
    (i % SIZE, i / SIZE)
}

/// Dynamic program over every joint state of the N=2 hetero grid.
/// `combine` folds the 25 joint-action values: max for the optimum, mean
/// for a uniformly random policy. Returns (return value, success value).
fn grid_dp(start: [Cell; 2], goals: [Cell; 2], combine: fn(&[(f64, f64)]) -> (f64, f64)) -> (f64, f64) {
    let states = CELLS * CELLS * 4;
    let mut next = vec![(0.0, 0.0); states];
    let key = |p0: usize, p1: usize, flags: usize| (p0 * CELLS + p1) * 4 + flags;
    for _t in (0..LIMIT).rev() {
        let mut cur = vec![(0.0, 0.0); states];
        for p0 in 0..CELLS {
            for p1 in 0..CELLS {
                for flags in 0..4usize {
                    if flags == 3 {
                        cur[key(p0, p1, flags)] = (0.0, 1.0);
                        continue;
                    }
                    let mut outcomes = Vec::with_capacity(25);
                    for a0 in 0..5 {
                        for a1 in 0..5 {
                            let n0 = step_cell(cell(p0), a0);
                            let n1 = step_cell(cell(p1), a1);
                            let mut f = flags;
                            let mut newly = 0;
                            if f & 1 == 0 && n0 == goals[0] {
                                f |= 1;
                                newly += 1;
                            }
                            if f & 2 == 0 && n1 == goals[1] {
                                f |= 2;
                                newly += 1;
                            }
                            let r = -0.01 + newly as f64 / 2.0;
                            let (v, s) = next[key(idx(n0), idx(n1), f)];
                            outcomes.push((r + v, s));
                        }
                    }
                    cur[key(p0, p1, flags)] = combine(&outcomes);
                }
            }
        }
        next = cur;
    }
    next[key(idx(start[0]), idx(start[1]), 0)]
}

fn best(v: &[(f64, f64)]) -> (f64, f64) {
    v.iter().copied().fold((f64::NEG_INFINITY, 0.0), |a, b| if b.0 > a.0 { b } else { a })
}

fn mean(v: &[(f64, f64)]) -> (f64, f64) {
    let n = v.len() as f64;
    (v.iter().map(|x| x.0).sum::<f64>() / n, v.iter().map(|x| x.1).sum::<f64>() / n)
}

fn manhattan(a: Cell, b: Cell) -> usize {
    a.0.abs_diff(b.0) + a.1.abs_diff(b.1)
}

fn greedy(from: Cell, to: Cell) -> usize {
    if from.1 < to.1 {
        0
    } else if from.1 > to.1 {
        1
    } else if from.0 > to.0 {
        2
    } else if from.0 < to.0 {
        3
    } else {
        4
    }
}

fn layout(seed: u64) -> GridWorld {
    let mut g = GridWorld::new(SIZE, 2, LIMIT, false);
    g.reset(seed);
    g
}

#[test]
fn optimum_matches_exhaustive_search_and_is_achieved() {
    for seed in 0..6 {
        let g = layout(seed);
        let start = [g.agents[0], g.agents[1]];
        let goals = [g.goals[0], g.goals[1]];
        let (opt, _) = grid_dp(start, goals, best);
        let d = manhattan(start[0], goals[0]).max(manhattan(start[1], goals[1]));
        assert!((opt - (1.0 - 0.01 * d as f64)).abs() < 1e-12, "seed {seed}: dp {opt} vs distance {d}");

        let mut env = g.clone();
        let mut total = 0.0;
        while !env.is_done() {
            let acts: Vec<Action> = (0..2).map(|i| Action::Discrete(greedy(env.agents[i], env.goals[i]))).collect();
            total += env.step(&acts).unwrap().reward;
        }
        assert!(env.is_success());
        assert!((total - opt).abs() < 1e-12, "seed {seed}: played {total} vs optimum {opt}");
    }
}

#[test]
fn random_policy_matches_exact_expectation() {
    let g = layout(3);
    let (exp_return, exp_success) = grid_dp([g.agents[0], g.agents[1]], [g.goals[0], g.goals[1]], mean);
    let mut rng = RngStream::new(77, 1);
    let episodes = 4000;
    let (mut returns, mut wins) = (0.0, 0usize);
    for _ in 0..episodes {
        let mut env = g.clone();
        while !env.is_done() {
            let acts: Vec<Action> = (0..2).map(|_| Action::Discrete(rng.below(5))).collect();
            returns += env.step(&acts).unwrap().reward;
        }
        wins += env.is_success() as usize;
    }
    let n = episodes as f64;
    let p = wins as f64 / n;
    let se = (exp_success * (1.0 - exp_success) / n).sqrt();
    assert!((p - exp_success).abs() <= 3.0 * se, "success {p} vs exact {exp_success} (se {se})");
    // Return per episode lies in [-0.12, 1]; a loose 3-SE bound from that range.
    assert!((returns / n - exp_return).abs() <= 3.0 * 1.12 / (2.0 * n.sqrt()));
}

#[test]
fn homogeneous_reward_ignores_identities() {
    let mut rng = RngStream::new(4, 4);
    for _ in 0..50 {
        let agents: Vec<Cell> = (0..3).map(|_| (rng.below(7), rng.below(7))).collect();
        let goals: Vec<Cell> = (0..3).map(|_| (rng.below(7), 1 + rng.below(6))).collect();
        let acts: Vec<usize> = (0..3).map(|_| rng.below(5)).collect();
        let perm = [2usize, 0, 1];
        let mut a = GridWorld::new(7, 3, 50, true);
        let mut b = a.clone();
        a.set_layout(agents.clone(), goals.clone()).unwrap();
        b.set_layout(perm.iter().map(|&i| agents[i]).collect(), goals.clone()).unwrap();
        if a.is_done() {
            continue;
        }
        let ra = a.step(&acts.iter().map(|&k| Action::Discrete(k)).collect::<Vec<_>>()).unwrap().reward;
        let rb = b.step(&perm.iter().map(|&i| Action::Discrete(acts[i])).collect::<Vec<_>>()).unwrap().reward;
        assert_eq!(ra, rb);
    }
}

#[test]
fn hetero_reward_depends_on_identities() {
    let agents = vec![(0, 0), (6, 0)];
    let goals = vec![(0, 1), (6, 6)];
    let up = vec![Action::Discrete(0), Action::Discrete(0)];
    let mut a = GridWorld::new(7, 2, 50, false);
    let mut b = a.clone();
    a.set_layout(agents.clone(), goals.clone()).unwrap();
    b.set_layout(vec![agents[1], agents[0]], goals).unwrap();
    assert_ne!(a.step(&up).unwrap().reward, b.step(&up).unwrap().reward);

    let pos = vec![[0.5, 0.5], [-1.0, 0.3], [1.2, -0.7]];
    let marks = vec![[0.0, 0.0], [1.0, 1.0], [-1.0, -1.0]];
    let swapped = vec![pos[1], pos[0], pos[2]];
    let reward = |homogeneous: bool, p: &Vec<[f64; 2]>| {
        let mut s = Spread::new(3, 100, homogeneous);
        s.set_layout(p.clone(), marks.clone()).unwrap();
        s.distance_reward()
    };
    assert_eq!(reward(true, &pos), reward(true, &swapped));
    assert_ne!(reward(false, &pos), reward(false, &swapped));
}

#[test]
fn episode_limits_are_exact() {
    for (cfg, limit) in [(EnvConfig::hetero_grid(), 50), (EnvConfig::hetero_spread(), 100)] {
        let mut env = Env::new(&cfg).unwrap();
        env.reset(1);
        let mut rng = RngStream::new(1, 2);
        let mut steps = 0;
        while !env.is_done() {
            let acts: Vec<Action> = match &env {
                // Staying put never completes the grid task.
                Env::Grid(_) => vec![Action::Discrete(4); 3],
                Env::Spread(_) => (0..3).map(|_| Action::Continuous(vec![rng.uniform_range(-1.0, 1.0); 2])).collect(),
            };
            env.step(&acts).unwrap();
            steps += 1;
        }
        assert_eq!(steps, limit);
        assert_eq!(env.steps_taken(), limit);
        assert!(env.step(&[]).is_err());
    }
}

#[test]
fn seeded_trajectories_are_bit_identical() {
    for cfg in [EnvConfig::hetero_grid(), EnvConfig::hetero_spread()] {
        let run = || {
            let mut env = Env::new(&cfg).unwrap();
            env.reset(42);
            let mut rng = RngStream::new(9, 9);
            let mut trace: Vec<u64> = Vec::new();
            while !env.is_done() {
                let acts: Vec<Action> = match &env {
                    Env::Grid(_) => (0..3).map(|_| Action::Discrete(rng.below(5))).collect(),
                    Env::Spread(_) => (0..3).map(|_| Action::Continuous(vec![rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0)])).collect(),
                };
                let r = env.step(&acts).unwrap();
                trace.push(r.reward.to_bits());
                trace.extend(env.observations().concat().iter().map(|v| v.to_bits()));
                trace.extend(env.global_state().iter().map(|v| v.to_bits()));
            }
            trace
        };
        assert_eq!(run(), run());
    }
}
