#![allow(dead_code)]

use hot_core::ctdg::{Event, EventStream};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random stream over `nodes` ids with many repeated timestamps, so tie
/// handling is exercised.
pub fn random_stream(events: usize, nodes: u32, seed: u64) -> EventStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0.0;
    let evs = (0..events)
        .map(|_| {
            if rng.gen_bool(0.6) {
                t += rng.gen_range(1..4) as f64;
            }
            let u = rng.gen_range(1..=nodes);
            let v = rng.gen_range(1..=nodes);
            Event {
                source: u,
                destination: v,
                timestamp: t,
                features: vec![rng.gen(), rng.gen()],
                label: None,
            }
        })
        .collect();
    EventStream::from_events(evs, nodes as usize, 2, 0).unwrap()
}

use hot_core::sampler::{Interaction, InteractionList};

/// Incident events of `node` before `t` by rescanning the whole stream.
pub fn brute_prior(s: &EventStream, node: u32, t: f64) -> Vec<(u32, f64, usize)> {
    let mut out = Vec::new();
    for (k, e) in s.events().iter().enumerate() {
        if e.timestamp >= t {
            continue;
        }
        if e.source == node {
            out.push((e.destination, e.timestamp, k));
        }
        if e.destination == node {
            out.push((e.source, e.timestamp, k));
        }
    }
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.2.cmp(&b.2)));
    out
}

fn last(v: Vec<(u32, f64, usize)>, n: usize, hop: usize) -> Vec<Interaction> {
    v[v.len().saturating_sub(n)..]
        .iter()
        .map(|&(neighbor, timestamp, event_index)| Interaction { neighbor, timestamp, event_index, hop })
        .collect()
}

/// Brute-force k-hop list: per-entry extension from the previous hop, then
/// re-sort and keep the `seq_cap` most recent.
pub fn brute_sample(s: &EventStream, u: u32, t: f64, budgets: &[usize], seq_cap: usize) -> InteractionList {
    let mut entries = last(brute_prior(s, u, t), budgets[0], 1);
    for (h, &b) in budgets.iter().enumerate().skip(1) {
        if b == 0 || entries.is_empty() {
            continue;
        }
        let frontier: Vec<u32> = entries.iter().filter(|e| e.hop == h).map(|e| e.neighbor).collect();
        for a in frontier {
            entries.extend(last(brute_prior(s, a, t), b, h + 1));
        }
        entries.sort_by(|a, b| {
            a.timestamp.total_cmp(&b.timestamp).then(a.event_index.cmp(&b.event_index)).then(a.hop.cmp(&b.hop))
        });
        let drop = entries.len().saturating_sub(seq_cap);
        entries.drain(..drop);
    }
    let drop = entries.len().saturating_sub(seq_cap);
    entries.drain(..drop);
    InteractionList { owner: u, query_time: t, entries }
}

/// Brute-force co-occurrence rows.
pub fn brute_cooccurrence(a: &[u32], b: &[u32]) -> Vec<[u32; 2]> {
    a.iter()
        .map(|&x| {
            if x == 0 {
                [0, 0]
            } else {
                [a.iter().filter(|&&y| y == x).count() as u32, b.iter().filter(|&&y| y == x).count() as u32]
            }
        })
        .collect()
}

use hot_core::tensor::{Graph, GradStore, ParamStore, Var};

/// Threshold sweep over every distinct score, highest first.
pub fn brute_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let (mut ap, mut prev_r) = (0.0, 0.0);
    for th in thresholds {
        let sel: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= th).collect();
        let tp = sel.iter().filter(|&&i| labels[i]).count() as f64;
        let r = tp / pos;
        ap += (r - prev_r) * tp / sel.len() as f64;
        prev_r = r;
    }
    ap
}

pub fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

/// Shifts every parameter by a small seeded amount so no ReLU input sits
/// exactly on its kink (zero bias times a zero count does otherwise).
pub fn jitter(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for x in store.get_mut(id).data_mut() {
            *x += rng.gen_range(-0.05..0.05);
        }
    }
}

/// Norm-wise relative error of autodiff vs central differences (h = 1e-5),
/// for every parameter in `store`. Returns `(name, error)` pairs.
pub fn param_fd_errors<F>(store: &ParamStore, build: F) -> Vec<(String, f64)>
where
    F: Fn(&mut Graph<'_>) -> Var,
{
    let mut grads = GradStore::zeros_like(store);
    {
        let mut g = Graph::with_params(store);
        let loss = build(&mut g);
        g.backward(loss).unwrap();
        g.accumulate_param_grads(&mut grads);
    }
    let eval = |s: &ParamStore| {
        let mut g = Graph::with_params(s);
        let loss = build(&mut g);
        g.value(loss).item()
    };
    let h = 1e-5;
    let mut work = store.clone();
    let mut out = Vec::new();
    for id in store.ids() {
        let n = store.get(id).numel();
        let mut numeric = vec![0.0; n];
        for j in 0..n {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let plus = eval(&work);
            work.get_mut(id).data_mut()[j] = orig - h;
            let minus = eval(&work);
            work.get_mut(id).data_mut()[j] = orig;
            numeric[j] = (plus - minus) / (2.0 * h);
        }
        let analytic = grads.get(id).data();
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        out.push((store.name(id).to_string(), diff / na.max(nn).max(1e-7)));
    }
    out
}

/// Weighted sum with fixed, distinct weights so every output element gets
/// its own gradient.
pub fn weighted_sum(g: &mut Graph<'_>, x: Var) -> Var {
    let n = g.value(x).numel();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
    let y = g.mul_const(x, w).unwrap();
    g.sum(y)
}
