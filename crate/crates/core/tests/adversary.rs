use std::collections::BTreeSet;

use num_bigint::BigInt;
use trusted_kmeans::adversary::{
    coalition_knowledge, leakage_report, singleton_attack, verify_replay, AdversaryError, EvidenceKind, LeakageClass,
};
use trusted_kmeans::averaging::ProtocolChoice;
use trusted_kmeans::kmeans::{run_kmeans, run_scripted, Dataset, KMeansConfig, Labels};
use trusted_kmeans::topology::{HonestPartition, Topology};
use trusted_kmeans::transcript::TranscriptStore;

fn cfg(k: usize, protocol: ProtocolChoice) -> KMeansConfig {
    KMeansConfig {
        k,
        max_iters: 10,
        protocol,
        scale: 1,
        master_seed: 11,
        trace: false,
    }
}

fn scripted(g: &Topology, values: &[f64], k: usize, script: &[Labels]) -> (Dataset, TranscriptStore) {
    let data = Dataset::scalars(10.0, values).unwrap();
    let init: Vec<Vec<f64>> = (0..k).map(|j| vec![j as f64]).collect();
    let store = run_scripted(g, &data, &init, &cfg(k, ProtocolChoice::ExactTreeSum), script).unwrap();
    (data, store)
}

#[test]
fn ring_components_match_ground_truth() {
    let g = Topology::ring(6);
    let values = [3.0, -4.0, 7.0, 1.0, 9.0, -2.0];
    let script = vec![vec![0, 1, 0, 1, 1, 0], vec![1, 1, 0, 0, 1, 1], vec![0, 0, 1, 1, 0, 1]];
    let (_, store) = scripted(&g, &values, 2, &script);
    let part = HonestPartition::from_corrupted(6, [2, 5]).unwrap();
    let know = coalition_knowledge(&store, &part, &g).unwrap();
    let members: Vec<Vec<usize>> = know
        .components
        .iter()
        .map(|c| c.members.iter().copied().collect())
        .collect();
    assert_eq!(members, vec![vec![0, 1], vec![3, 4]]);
    for comp in &know.components {
        assert_eq!(comp.views.len(), script.len());
        for (t, view) in comp.views.iter().enumerate() {
            for j in 0..2 {
                let mut sum = 0i64;
                let mut count = 0u64;
                for &i in &comp.members {
                    if script[t][i] == j {
                        sum += values[i] as i64;
                        count += 1;
                    }
                }
                assert_eq!(view.sums[j], vec![BigInt::from(sum)], "t={t} j={j}");
                assert_eq!(view.counts[j], count);
            }
        }
    }
}

#[test]
fn single_honest_component_with_one_cluster_sees_the_total() {
    let g = Topology::complete(5);
    let values = [1.0, 2.0, 3.0, 4.0, 5.0];
    let (_, store) = scripted(&g, &values, 1, &[vec![0; 5], vec![0; 5]]);
    let part = HonestPartition::from_corrupted(5, [4]).unwrap();
    let know = coalition_knowledge(&store, &part, &g).unwrap();
    assert_eq!(know.components.len(), 1);
    for view in &know.components[0].views {
        assert_eq!(view.sums, vec![vec![BigInt::from(10)]]);
        assert_eq!(view.counts, vec![4]);
    }
}

#[test]
fn no_coalition_means_no_knowledge() {
    let g = Topology::ring(4);
    let (_, store) = scripted(&g, &[1.0, 2.0, 3.0, 4.0], 2, &[vec![0, 0, 1, 1]]);
    let know = coalition_knowledge(&store, &HonestPartition::all_honest(4), &g).unwrap();
    assert!(know.components.is_empty());
    let report = leakage_report(&know);
    assert_eq!(report.summary().perfect, 4);
    assert!(report.nodes.iter().all(|n| !n.final_label_exposed));
}

#[test]
fn lone_mover_is_recovered() {
    // Nodes 0..5 honest, node 5 corrupted; only node 3 changes cluster, 0 -> 1.
    let g = Topology::complete(6);
    let values = [2.0, 5.0, -3.0, 7.0, 4.0, 1.0];
    let script = vec![vec![1, 0, 0, 0, 1, 0], vec![1, 0, 0, 0, 1, 1], vec![1, 0, 0, 1, 1, 1]];
    let (_, store) = scripted(&g, &values, 2, &script);
    let part = HonestPartition::from_corrupted(6, [5]).unwrap();
    let know = coalition_knowledge(&store, &part, &g).unwrap();
    let found = singleton_attack(&know);
    assert_eq!(found.len(), 2, "both pairs spanning the move expose node 3");
    for d in &found {
        assert_eq!(d.node, 3);
        assert_eq!(d.units, vec![BigInt::from(7)]);
        assert_eq!(d.evidence.kind, EvidenceKind::SingleMover { from: 0, to: 1 });
    }
    let report = leakage_report(&know);
    let n3 = report.node(3).unwrap();
    assert_eq!(n3.class, LeakageClass::Full);
    assert_eq!(n3.recovered, Some(vec![7.0]));
    for i in [0, 1, 2, 4] {
        assert_eq!(report.node(i).unwrap().class, LeakageClass::Perfect, "node {i}");
    }
}

#[test]
fn static_labels_leak_nothing_by_differencing() {
    let g = Topology::complete(6);
    let script = vec![vec![0, 0, 1, 1, 0, 1]; 3];
    let (_, store) = scripted(&g, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, &script);
    let part = HonestPartition::from_corrupted(6, [5]).unwrap();
    let know = coalition_knowledge(&store, &part, &g).unwrap();
    assert!(singleton_attack(&know).is_empty());
    assert_eq!(leakage_report(&know).summary().perfect, 5);
}

#[test]
fn simultaneous_swap_reveals_only_the_sum() {
    let g = Topology::complete(7);
    // 0 and 1 swap clusters together; each cluster keeps at least two honest nodes.
    let script = vec![vec![0, 1, 0, 0, 1, 1, 0], vec![1, 0, 0, 0, 1, 1, 0]];
    let (_, store) = scripted(&g, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0], 2, &script);
    let part = HonestPartition::from_corrupted(7, [6]).unwrap();
    let know = coalition_knowledge(&store, &part, &g).unwrap();
    assert!(singleton_attack(&know).is_empty());
}

#[test]
fn isolated_honest_node_is_fully_exposed() {
    // On a path 0-1-2, corrupting 1 isolates both ends.
    let g = Topology::path(3);
    let (_, store) = scripted(&g, &[4.0, 1.0, -6.0], 2, &[vec![0, 1, 1]]);
    let part = HonestPartition::from_corrupted(3, [1]).unwrap();
    let report = leakage_report(&coalition_knowledge(&store, &part, &g).unwrap());
    assert_eq!(report.node(0).unwrap().recovered, Some(vec![4.0]));
    assert_eq!(report.node(2).unwrap().recovered, Some(vec![-6.0]));
    assert!(report.node(0).unwrap().final_label_exposed);
    let text = report.to_text();
    assert!(text.contains("node=0 class=full evidence=0-0:singleton(0) value=4 final_label_exposed=true"), "{text}");
}

#[test]
fn singleton_cluster_bounds_the_rest_of_the_component() {
    let g = Topology::complete(5);
    let script = vec![vec![0, 0, 0, 1, 0]];
    let (_, store) = scripted(&g, &[1.0, 2.0, 3.0, 8.0, 0.0], 2, &script);
    let part = HonestPartition::from_corrupted(5, [4]).unwrap();
    let report = leakage_report(&coalition_knowledge(&store, &part, &g).unwrap());
    assert_eq!(report.node(3).unwrap().recovered, Some(vec![8.0]));
    for i in 0..3 {
        assert_eq!(report.node(i).unwrap().class, LeakageClass::Bounded { n_h: 4 });
    }
    let s = report.summary();
    assert_eq!((s.perfect, s.bounded, s.full), (0, 3, 1));
}

#[test]
fn mismatched_graph_is_rejected() {
    let g = Topology::ring(5);
    let (_, store) = scripted(&g, &[1.0, 2.0, 3.0, 4.0, 5.0], 2, &[vec![0, 0, 1, 1, 0]]);
    let part = HonestPartition::from_corrupted(5, [0]).unwrap();
    assert!(matches!(
        coalition_knowledge(&store, &part, &Topology::complete(5)),
        Err(AdversaryError::Mismatch(_))
    ));
    let wrong_n = HonestPartition::from_corrupted(4, [0]).unwrap();
    assert!(coalition_knowledge(&store, &wrong_n, &Topology::ring(4)).is_err());
}

#[test]
fn transcripts_replay_for_every_node() {
    let g = Topology::erdos_renyi(8, 0.5, 3);
    assert!(g.is_connected());
    let data = Dataset::scalars(10.0, &[1.0, 1.5, 8.0, 9.0, -2.0, 0.5, 7.5, 3.25]).unwrap();
    let init = vec![vec![0.0], vec![5.0]];
    let mut c = cfg(2, ProtocolChoice::SyncConsensus { max_rounds: 5000 });
    c.scale = 4;
    let res = run_kmeans(&g, &data, &init, &c).unwrap();
    let store = res.transcripts.unwrap();
    for i in 0..8 {
        verify_replay(&store, i).unwrap();
    }
    let part = HonestPartition::from_corrupted(8, BTreeSet::from([0, 5])).unwrap();
    coalition_knowledge(&store, &part, &g).unwrap();
}

#[test]
fn rotating_pairs_pin_a_value_without_singletons() {
    // a+b, a+c, b+c across three iterations give 2a; no cluster ever holds one node.
    let g = Topology::complete(5);
    let script = vec![vec![0, 0, 1, 1, 0], vec![0, 1, 0, 1, 0], vec![0, 1, 1, 0, 0]];
    let (_, store) = scripted(&g, &[3.0, 5.0, 2.0, 7.0, 0.0], 2, &script);
    let part = HonestPartition::from_corrupted(5, [4]).unwrap();
    let know = coalition_knowledge(&store, &part, &g).unwrap();
    assert!(singleton_attack(&know).is_empty());
    let report = leakage_report(&know);
    for (i, v) in [(0, 3.0), (1, 5.0), (2, 2.0), (3, 7.0)] {
        let n = report.node(i).unwrap();
        assert_eq!(n.class, LeakageClass::Full, "node {i}");
        assert_eq!(n.recovered, Some(vec![v]));
        assert_eq!(n.evidence[0].kind, EvidenceKind::LinearSystem);
    }
}
