//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use num_bigint::BigInt;
use num_traits::{ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use trusted_kmeans::adversary::{
    coalition_knowledge, leakage_report, same_cluster_probability, share_uniformity_test, LeakageClass,
};
use trusted_kmeans::averaging::{
    gossip_round, metropolis_weights, run_protocol, sync_round, AveragingState, ProtocolChoice,
};
use trusted_kmeans::field::{choose_modulus, FieldElement, FieldModulus};
use trusted_kmeans::harness::{run_experiment, SimConfig};
use trusted_kmeans::kmeans::{centralized_oracle, run_kmeans, run_scripted, Dataset, KMeansConfig, Labels};
use trusted_kmeans::seed::SeedTree;
use trusted_kmeans::sharing::{exchange_randoms, make_shares, reconstruct_checked, share_total};
use trusted_kmeans::topology::{HonestPartition, Topology};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Connected Erdős–Rényi graph; retries the seed until connected.
fn connected(n: usize, prob: f64, rng: &mut ChaCha20Rng) -> Topology {
    loop {
        let g = Topology::erdos_renyi(n, prob, rng.random());
        if g.is_connected() {
            return g;
        }
    }
}

fn protocols(seed: u64) -> [ProtocolChoice; 3] {
    [
        ProtocolChoice::SyncConsensus { max_rounds: 1_000_000 },
        ProtocolChoice::RandomGossip {
            max_pairings: 50_000_000,
            seed,
        },
        ProtocolChoice::ExactTreeSum,
    ]
}

fn exactness() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let instances = 200;
    let mut runs = 0;
    let mut max_n = 0;
    for inst in 0..instances {
        let n = if inst % 10 == 0 { 64 } else { rng.random_range(2..=40) };
        max_n = max_n.max(n);
        let k = rng.random_range(1..=5);
        let d = rng.random_range(1..=3);
        let prob = (4.0 / n as f64).clamp(0.15, 1.0);
        let g = connected(n, prob, &mut rng);
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-10i32..=10) as f64).collect())
            .collect();
        let data = Dataset::new(d, 10.0, points).unwrap();
        let init: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| rng.random_range(-10i32..=10) as f64).collect())
            .collect();
        let oracle = centralized_oracle(&data, &init, 10).unwrap();
        for protocol in protocols(rng.random()) {
            let cfg = KMeansConfig {
                k,
                max_iters: 10,
                protocol: protocol.clone(),
                scale: 1,
                master_seed: rng.random(),
                trace: false,
            };
            let secure = run_kmeans(&g, &data, &init, &cfg).map_err(|e| format!("instance {inst} {}: {e}", protocol.name()))?;
            check(
                secure.label_history == oracle.label_history
                    && secure.center_history == oracle.center_history
                    && secure.labels == oracle.labels
                    && secure.centers == oracle.centers
                    && secure.converged == oracle.converged,
                || format!("instance {inst} ({}) diverges from the reference", protocol.name()),
            )?;
            runs += 1;
        }
    }
    Ok(format!(
        "{instances} instances x 3 protocols ({runs} runs, n <= {max_n}, k <= 5, d <= 3): label and center histories identical"
    ))
}

fn share_conservation() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let triples = 1000;
    let mut edges_checked = 0;
    for t in 0..triples {
        let n = rng.random_range(1..=16);
        let g = Topology::erdos_renyi(n, rng.random_range(0.0..1.0), rng.random());
        let p = choose_modulus(n, rng.random_range(1.0..1e6), rng.random_range(1..=1000));
        let width = rng.random_range(1..=4);
        let inputs: Vec<Vec<FieldElement>> = (0..n)
            .map(|_| (0..width).map(|_| p.element(rng.random::<u64>())).collect())
            .collect();
        let randoms = exchange_randoms(&g, width, &SeedTree::new(rng.random()), t, &p, None);
        let shares = make_shares(&inputs, &randoms, &g).map_err(|e| e.to_string())?;
        for e in 0..width {
            // Reference: plain integer sums reduced once at the end.
            let own: BigInt = shares.own.iter().map(|s| BigInt::from(s[e].value().clone())).sum();
            let truth: BigInt = inputs.iter().map(|a| BigInt::from(a[e].value().clone())).sum();
            let pm = BigInt::from(p.value().clone());
            check((own - truth) % &pm == BigInt::zero(), || format!("triple {t}: sum of own shares differs"))?;
        }
        for (i, k) in g.edges() {
            for e in 0..width {
                let s = BigInt::from(shares.edge[&(i, k)][e].value().clone())
                    + BigInt::from(shares.edge[&(k, i)][e].value().clone());
                check(s % BigInt::from(p.value().clone()) == BigInt::zero(), || {
                    format!("triple {t}: edge ({i},{k}) not antisymmetric")
                })?;
            }
            edges_checked += 1;
        }
    }
    Ok(format!("{triples} triples, {edges_checked} edges: conservation and antisymmetry exact"))
}

fn reconstruction() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let instances = 150;
    let mut converged = [0usize; 3];
    for inst in 0..instances {
        let n = rng.random_range(1..=24);
        let g = connected(n, (3.0 / n as f64).min(1.0), &mut rng);
        let p = choose_modulus(n, 50.0, 10);
        let width = rng.random_range(1..=3);
        let inputs: Vec<Vec<FieldElement>> = (0..n)
            .map(|_| (0..width).map(|_| p.element(rng.random::<u64>())).collect())
            .collect();
        let shares = make_shares(&inputs, &exchange_randoms(&g, width, &SeedTree::new(rng.random()), 0, &p, None), &g)
            .map_err(|e| e.to_string())?;
        let values: Vec<Vec<BigInt>> = shares
            .own
            .iter()
            .map(|s| s.iter().map(|v| BigInt::from(v.value().clone())).collect())
            .collect();
        for (pi, protocol) in protocols(rng.random()).iter().enumerate() {
            let out = run_protocol(&g, &values, protocol, 0, None).map_err(|e| e.to_string())?;
            if !out.converged {
                continue;
            }
            converged[pi] += 1;
            for e in 0..width {
                let truth = FieldElement::sum(&p, inputs.iter().map(|a| &a[e])).unwrap();
                let total = share_total(&shares.own, e);
                for node in &out.s_bar {
                    let r = reconstruct_checked(&node[e], n, &p, &total).map_err(|e| format!("instance {inst}: {e}"))?;
                    check(r == truth, || format!("instance {inst} ({}): wrong sum", protocol.name()))?;
                }
            }
        }
    }
    check(converged[2] == instances, || {
        format!("exact tree sum converged on {}/{instances}", converged[2])
    })?;
    Ok(format!(
        "{instances} instances; converged sync {}/{instances}, gossip {}/{instances}, tree {}/{instances}; every converged run reconstructs the sum",
        converged[0], converged[1], converged[2]
    ))
}

fn secrecy() -> Outcome {
    let p = FieldModulus::from_u64(11).unwrap();
    // Node 3 is isolated; nodes 0..3 form a path.
    let g = Topology::new(4, [(0, 1), (1, 2)]).unwrap();
    let inputs: Vec<Vec<FieldElement>> = [3u32, 7, 0, 5].iter().map(|&a| vec![p.element(a)]).collect();
    let runs = 10_000;
    let mut honest: Vec<Vec<FieldElement>> = vec![Vec::new(); 4];
    let mut broken: Vec<Vec<FieldElement>> = vec![Vec::new(); 4];
    for seed in 0..runs as u64 {
        let randoms = exchange_randoms(&g, 1, &SeedTree::new(seed), 0, &p, None);
        let good = make_shares(&inputs, &randoms, &g).unwrap();
        let bad = make_shares(&inputs, &randoms.zeroed(), &g).unwrap();
        for i in 0..4 {
            honest[i].push(good.own[i][0].clone());
            broken[i].push(bad.own[i][0].clone());
        }
    }
    let mut parts = Vec::new();
    for i in 0..3 {
        let t = share_uniformity_test(&honest[i], &p).map_err(|e| e.to_string())?;
        check(!t.reject, || format!("node {i}: uniformity rejected, chi2 = {:.2}", t.statistic))?;
        let b = share_uniformity_test(&broken[i], &p).map_err(|e| e.to_string())?;
        check(b.reject, || format!("node {i}: zeroed randoms not rejected"))?;
        parts.push(format!("node {i} chi2 {:.2}", t.statistic));
    }
    let crit = share_uniformity_test(&honest[0], &p).unwrap().critical_value;
    Ok(format!(
        "p = 11, {runs} samples per node: {} < {crit:.2}; zeroed randoms rejected",
        parts.join(", ")
    ))
}

/// Distinct values of each component member consistent with the per-cluster
/// sums of every iteration, enumerating all assignments over `0..10`.
fn consistent_values(members: &[usize], script: &[Labels], sums: &[Vec<i64>], k: usize) -> Vec<BTreeSet<i64>> {
    let m = members.len();
    let mut seen = vec![BTreeSet::new(); m];
    let mut vals = vec![0i64; m];
    for code in 0..10usize.pow(m as u32) {
        let mut c = code;
        for v in vals.iter_mut() {
            *v = (c % 10) as i64;
            c /= 10;
        }
        let ok = script.iter().zip(sums).all(|(labels, s)| {
            (0..k).all(|j| {
                members
                    .iter()
                    .zip(&vals)
                    .filter(|(&i, _)| labels[i] == j)
                    .map(|(_, v)| v)
                    .sum::<i64>()
                    == s[j]
            })
        });
        if ok {
            for (set, v) in seen.iter_mut().zip(&vals) {
                set.insert(*v);
            }
        }
    }
    seen
}

struct Scenario {
    g: Topology,
    corrupted: Vec<usize>,
    values: Vec<i64>,
    k: usize,
    script: Vec<Labels>,
}

/// Returns (full, perfect) counts after checking recovery and conservatism.
fn audit(s: &Scenario) -> Result<(Vec<usize>, usize), String> {
    let n = s.values.len();
    let data = Dataset::scalars(10.0, &s.values.iter().map(|&v| v as f64).collect::<Vec<_>>()).unwrap();
    let init: Vec<Vec<f64>> = (0..s.k).map(|j| vec![j as f64]).collect();
    let cfg = KMeansConfig {
        k: s.k,
        max_iters: s.script.len(),
        protocol: ProtocolChoice::ExactTreeSum,
        scale: 1,
        master_seed: 5,
        trace: false,
    };
    let store = run_scripted(&s.g, &data, &init, &cfg, &s.script).map_err(|e| e.to_string())?;
    let part = HonestPartition::from_corrupted(n, s.corrupted.iter().copied()).unwrap();
    let know = coalition_knowledge(&store, &part, &s.g).map_err(|e| e.to_string())?;
    let report = leakage_report(&know);
    let mut full = Vec::new();
    let mut perfect = 0;
    for comp in &know.components {
        let members: Vec<usize> = comp.members.iter().copied().collect();
        let sums: Vec<Vec<i64>> = comp.views.iter().map(|v| v.sums.iter().map(|c| c[0].to_i64().unwrap()).collect()).collect();
        let brute = (members.len() <= 4).then(|| consistent_values(&members, &s.script, &sums, s.k));
        for (idx, &i) in members.iter().enumerate() {
            let node = report.node(i).unwrap();
            match node.class {
                LeakageClass::Full => {
                    check(node.recovered == Some(vec![s.values[i] as f64]), || {
                        format!("node {i} recovered {:?}, truth {}", node.recovered, s.values[i])
                    })?;
                    full.push(i);
                }
                LeakageClass::Perfect => {
                    if let Some(b) = &brute {
                        check(b[idx].len() >= 2, || format!("perfect node {i} is pinned to {:?}", b[idx]))?;
                    }
                    perfect += 1;
                }
                LeakageClass::Bounded { .. } => {}
            }
        }
    }
    Ok((full, perfect))
}

fn leakage() -> Outcome {
    // Constructed: singleton cluster, lone mover, and a static scenario.
    let singleton = Scenario {
        g: Topology::complete(5),
        corrupted: vec![4],
        values: vec![4, 6, 2, 7, 0],
        k: 2,
        script: vec![vec![0, 0, 0, 1, 0], vec![0, 0, 0, 1, 1]],
    };
    let (full, _) = audit(&singleton)?;
    check(full == vec![3], || format!("singleton scenario exposed {full:?}"))?;

    let mover = Scenario {
        g: Topology::complete(6),
        corrupted: vec![5],
        values: vec![2, 5, 3, 7, 4, 1],
        k: 2,
        script: vec![vec![1, 0, 0, 0, 1, 0], vec![1, 0, 0, 0, 1, 1], vec![1, 0, 0, 1, 1, 1]],
    };
    let (full, perfect) = audit(&mover)?;
    check(full == vec![3] && perfect == 4, || format!("mover scenario exposed {full:?}"))?;

    let ring = Scenario {
        g: Topology::ring(8),
        corrupted: vec![0, 5],
        values: vec![1, 3, 8, 5, 6, 9, 2, 4],
        k: 2,
        script: vec![vec![0, 0, 1, 0, 1, 1, 1, 1]; 3],
    };
    let (full, perfect) = audit(&ring)?;
    check(full.is_empty() && perfect == 6, || format!("static ring exposed {full:?}"))?;

    // Random scenarios on small graphs where honest components stay within 4 nodes.
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let (mut scenarios, mut fulls, mut perfects) = (0, 0, 0);
    while scenarios < 300 {
        let n = rng.random_range(3..=8);
        let g = connected(n, 0.45, &mut rng);
        let corrupted: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.35)).collect();
        let honest: BTreeSet<usize> = (0..n).filter(|i| !corrupted.contains(i)).collect();
        if corrupted.is_empty() || g.connected_components(&honest).unwrap().iter().any(|c| c.len() > 4) {
            continue;
        }
        let k = rng.random_range(1..=3);
        let iters = rng.random_range(1..=4);
        let s = Scenario {
            g,
            corrupted,
            values: (0..n).map(|_| rng.random_range(3..=6)).collect(),
            k,
            script: (0..iters).map(|_| (0..n).map(|_| rng.random_range(0..k)).collect()).collect(),
        };
        let (full, perfect) = audit(&s)?;
        fulls += full.len();
        perfects += perfect;
        scenarios += 1;
    }
    Ok(format!(
        "3 constructed + {scenarios} random scenarios: {fulls} full disclosures all exact, {perfects} perfect nodes each with >= 2 consistent values"
    ))
}

fn same_cluster() -> Outcome {
    let trials = 100_000u32;
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let mut parts = Vec::new();
    for (m, k) in [(2usize, 2usize), (3, 2), (3, 4)] {
        let expect = same_cluster_probability(m, k).map_err(|e| e.to_string())?;
        // Event: every one of the M nodes lands in cluster 0.
        let hits = (0..trials)
            .filter(|_| (0..m).all(|_| rng.random_range(0..k) == 0))
            .count();
        let est = hits as f64 / trials as f64;
        let se = (expect * (1.0 - expect) / trials as f64).sqrt();
        let z = (est - expect) / se;
        check(z.abs() <= 3.0, || format!("(M={m}, k={k}): estimate {est} vs {expect}, z = {z:.2}"))?;
        parts.push(format!("({m},{k}) {est:.4} vs {expect:.4} z={z:+.2}"));
    }
    Ok(format!("{trials} trials each: {}", parts.join("; ")))
}

fn mass_and_contraction() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let instances = 100;
    let mut rounds = 0;
    for inst in 0..instances {
        let n = rng.random_range(2..=12);
        let g = connected(n, 0.3, &mut rng);
        let width = rng.random_range(1..=3);
        let values: Vec<Vec<BigInt>> = (0..n)
            .map(|_| (0..width).map(|_| BigInt::from(rng.random_range(-1000i64..=1000))).collect())
            .collect();
        let w = metropolis_weights(&g).unwrap();
        let start = AveragingState::from_integers(&values).unwrap();
        let total = start.total();
        let mut state = start.clone();
        for _ in 0..40 {
            let next = sync_round(&state, &w);
            check(next.total() == total, || format!("instance {inst}: sync round changed the sum"))?;
            for e in 0..width {
                check(next.spread(e) <= state.spread(e), || format!("instance {inst}: spread grew"))?;
            }
            state = next;
            rounds += 1;
        }
        let mut state = start;
        let mut g_rng = ChaCha20Rng::seed_from_u64(rng.random());
        for _ in 0..100 {
            state = gossip_round(&state, &g, &mut g_rng).map_err(|e| e.to_string())?;
            check(state.total() == total, || format!("instance {inst}: gossip round changed the sum"))?;
        }
    }
    Ok(format!(
        "{instances} instances: {rounds} sync rounds and {} gossip pairings conserve the exact sum; sync spread never increases",
        instances * 100
    ))
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let configs = [
        "run.master_seed = 7\ntopology.kind = ring\ndata.source = inline\ndata.values = 1;2;3;10;11;12\n\
         data.x_max = 20\nkmeans.k = 2\nkmeans.init = 0;13\nadversary.corrupted = 2,5\nrun.trace = true\n",
        "run.master_seed = 99\ntopology.kind = geometric\ntopology.nodes = 20\ntopology.radius = 0.5\n\
         data.source = mixture\ndata.dim = 2\ndata.means = -3,0;3,0\ndata.std = 1.5\ndata.x_max = 8\n\
         codec.scale = 16\nkmeans.k = 2\nprotocol.kind = gossip\nadversary.fraction = 0.3\n",
    ];
    let mut files = 0;
    for (ci, text) in configs.iter().enumerate() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for dir in [&a, &b] {
            let mut cfg = SimConfig::parse(text, Path::new(".")).map_err(|e| e.to_string())?;
            cfg.output_dir = dir.path().to_path_buf();
            let m = run_experiment(&cfg).map_err(|e| e.to_string())?.metrics;
            check(m.success(), || format!("config {ci} did not converge"))?;
        }
        let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
        check(ta.iter().any(|(f, _)| f.starts_with("transcripts")), || "no transcripts written".into())?;
        check(ta == tb, || format!("config {ci}: outputs differ between runs"))?;
        files += ta.len();
    }
    Ok(format!("2 configs run twice: {files} files (metrics, transcripts, reports) byte-identical"))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("exactness", exactness),
        ("share conservation", share_conservation),
        ("reconstruction", reconstruction),
        ("perfect secrecy", secrecy),
        ("leakage semantics", leakage),
        ("same-cluster probability", same_cluster),
        ("mass conservation and contraction", mass_and_contraction),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} ({name}): PASS [{secs:.1}s] {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL [{secs:.1}s] {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
