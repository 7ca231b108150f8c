use scenegat::backbone::{alltoken_round_pairs, interleaved_round_pairs, Backbone, BackboneConfig};
use scenegat::scenario::{generate, Family, GenConfig};
use scenegat::scene::{featurize, AgentFeatureTensor, FeatureConfig, MapFeatureTensor};
use scenegat_autograd::rng::stream_rng;
use scenegat_autograd::{Graph, ParamStore, Tensor};

use rand::seq::SliceRandom;
use rand::Rng;

fn features() -> FeatureConfig {
    FeatureConfig {
        n_agents: 8,
        n_lanes: 12,
        t_hist: 20,
        lane_segments: 5,
    }
}

fn backbone(store: &mut ParamStore) -> Backbone {
    let config = BackboneConfig {
        d_model: 16,
        n_interleave: 2,
        m_alltoken: 2,
        ..BackboneConfig::default()
    };
    Backbone::new(store, config, features(), 11).unwrap()
}

/// Ten highway and ten urban scenes.
fn scenes() -> Vec<(AgentFeatureTensor, MapFeatureTensor)> {
    let mut out = Vec::new();
    for family in [Family::Highway, Family::Urban] {
        let c = GenConfig {
            scene_count: 10,
            seed: 3,
            agent_count: (3, 10),
            ..GenConfig::for_family(family)
        };
        for s in generate(&c).unwrap().scenes {
            let f = featurize(&s.scene, &features()).unwrap();
            out.push((f.agents, f.map));
        }
    }
    out
}

/// Moves slot `i` to slot `perm[i]`.
fn permute(data: &Tensor, valid: &[bool], perm: &[usize]) -> (Tensor, Vec<bool>) {
    let row = data.len() / valid.len();
    let mut out = Tensor::zeros(data.shape());
    let mut mask = vec![false; valid.len()];
    for (i, &p) in perm.iter().enumerate() {
        out.data_mut()[p * row..(p + 1) * row].copy_from_slice(&data.data()[i * row..(i + 1) * row]);
        mask[p] = valid[i];
    }
    (out, mask)
}

fn rows_close(a: &Tensor, ra: usize, b: &Tensor, rb: usize, tol: f64) -> bool {
    a.row(ra).iter().zip(b.row(rb)).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn permutation_equivariance() {
    let mut store = ParamStore::new();
    let bb = backbone(&mut store);
    for (n, (agents, map)) in scenes().into_iter().enumerate() {
        let mut rng = stream_rng(n as u64, "perm", 0);
        let mut pa: Vec<usize> = (0..agents.valid_mask.len()).collect();
        let mut pm: Vec<usize> = (0..map.valid_mask.len()).collect();
        // the target stays in slot 0
        pa[1..].shuffle(&mut rng);
        pm.shuffle(&mut rng);
        let (ad, am) = permute(&agents.data, &agents.valid_mask, &pa);
        let (md, mm) = permute(&map.data, &map.valid_mask, &pm);
        let agents_p = AgentFeatureTensor {
            data: ad,
            valid_mask: am,
            slots: vec![None; pa.len()],
        };
        let map_p = MapFeatureTensor {
            data: md,
            valid_mask: mm,
            slots: vec![None; pm.len()],
        };
        for masked in [false, true] {
            let g = Graph::new();
            let (base, perm) = if masked {
                (
                    bb.encode_scene_masked(&g, &store, &agents, &map).unwrap(),
                    bb.encode_scene_masked(&g, &store, &agents_p, &map_p).unwrap(),
                )
            } else {
                (
                    bb.encode_scene(&g, &store, &agents, &map).unwrap(),
                    bb.encode_scene(&g, &store, &agents_p, &map_p).unwrap(),
                )
            };
            let (a0, a1) = (base.agent_tokens.value(), perm.agent_tokens.value());
            let (m0, m1) = (base.map_tokens.value(), perm.map_tokens.value());
            for i in (0..pa.len()).filter(|&i| agents.valid_mask[i]) {
                assert!(rows_close(&a0, i, &a1, pa[i], 1e-9), "scene {n} agent {i}");
            }
            for i in (0..pm.len()).filter(|&i| map.valid_mask[i]) {
                assert!(rows_close(&m0, i, &m1, pm[i], 1e-9), "scene {n} lane {i}");
            }
        }
    }
}

#[test]
fn padding_insensitivity() {
    let mut store = ParamStore::new();
    let bb = backbone(&mut store);
    let mut rng = stream_rng(9, "garbage", 0);
    for (n, (agents, map)) in scenes().into_iter().enumerate() {
        let mut a2 = agents.clone();
        let mut m2 = map.clone();
        let arow = a2.data.len() / a2.valid_mask.len();
        for (i, v) in agents.valid_mask.iter().enumerate() {
            if !v {
                a2.data.data_mut()[i * arow..(i + 1) * arow].iter_mut().for_each(|x| *x = rng.random_range(-50.0..50.0));
            }
        }
        let mrow = m2.data.len() / m2.valid_mask.len();
        for (i, v) in map.valid_mask.iter().enumerate() {
            if !v {
                m2.data.data_mut()[i * mrow..(i + 1) * mrow].iter_mut().for_each(|x| *x = rng.random_range(-50.0..50.0));
            }
        }
        for masked in [false, true] {
            let g = Graph::new();
            let enc = |a: &AgentFeatureTensor, m: &MapFeatureTensor| {
                if masked {
                    bb.encode_scene_masked(&g, &store, a, m).unwrap()
                } else {
                    bb.encode_scene(&g, &store, a, m).unwrap()
                }
            };
            let (t0, t1) = (enc(&agents, &map), enc(&a2, &m2));
            let mask: Vec<bool> = agents.valid_mask.iter().chain(&map.valid_mask).copied().collect();
            let (c0, c1) = (t0.combined.value(), t1.combined.value());
            for (r, &v) in mask.iter().enumerate() {
                if v {
                    assert!(rows_close(&c0, r, &c1, r, 1e-9), "scene {n} row {r}");
                }
            }
            if !masked {
                for (r, &v) in mask.iter().enumerate() {
                    if !v {
                        assert!(c1.row(r).iter().all(|&x| x == 0.0), "padded row {r} not zero");
                    }
                }
            }
        }
    }
}

#[test]
fn compact_and_padded_compositions_agree() {
    let mut store = ParamStore::new();
    let bb = backbone(&mut store);
    for (n, (agents, map)) in scenes().into_iter().enumerate() {
        let g = Graph::new();
        let a = bb.encode_scene(&g, &store, &agents, &map).unwrap().combined.value();
        let b = bb.encode_scene_masked(&g, &store, &agents, &map).unwrap().combined.value();
        let mask: Vec<bool> = agents.valid_mask.iter().chain(&map.valid_mask).copied().collect();
        for (r, &v) in mask.iter().enumerate() {
            if v {
                assert!(rows_close(&a, r, &b, r, 1e-9), "scene {n} row {r}");
            }
        }
    }
}

#[test]
fn batched_encoding_matches_single_scenes() {
    let mut store = ParamStore::new();
    let bb = backbone(&mut store);
    let all = scenes();
    let inputs: Vec<(&AgentFeatureTensor, &MapFeatureTensor)> = all.iter().map(|(a, m)| (a, m)).collect();
    let g = Graph::new();
    let batch = bb.encode_batch(&g, &store, &inputs).unwrap();
    let ego = batch.ego_tokens(&g).unwrap().value();
    for (i, (a, m)) in all.iter().enumerate() {
        let single = bb.encode_scene(&g, &store, a, m).unwrap().agent_tokens.value();
        assert!(rows_close(&ego, i, &single, 0, 1e-9), "scene {i}");
    }
}

#[test]
fn attention_pair_counts() {
    let mut store = ParamStore::new();
    let bb = backbone(&mut store);
    let (na, nm) = (features().n_agents, features().n_lanes);
    // padded path: counts are fixed by the slot capacities
    let (agents, map) = scenes().remove(0);
    let g = Graph::new();
    let (a, m) = bb.subgraph_encode(&g, &store, &agents, &map).unwrap();
    let before = g.score_entries();
    let a = bb.agent_self_block(0, &g, &store, a, &agents.valid_mask).unwrap();
    bb.agent_map_block(0, &g, &store, a, m, &agents.valid_mask, &map.valid_mask).unwrap();
    assert_eq!(g.score_entries() - before, interleaved_round_pairs(na, nm));
    assert_eq!(interleaved_round_pairs(na, nm), na * na + na * nm);
    let c = g.concat(&[a, m], 0).unwrap();
    let mask: Vec<bool> = agents.valid_mask.iter().chain(&map.valid_mask).copied().collect();
    let before = g.score_entries();
    bb.all_token_block(0, &g, &store, c, &mask).unwrap();
    assert_eq!(g.score_entries() - before, alltoken_round_pairs(na, nm));
    assert_eq!(alltoken_round_pairs(na, nm), (na + nm) * (na + nm));

    // compact path on a fully populated scene
    let c = GenConfig {
        scene_count: 1,
        agent_count: (na + 2, na + 4),
        ..GenConfig::urban()
    };
    let s = generate(&c).unwrap().scenes.remove(0);
    let f = featurize(&s.scene, &features()).unwrap();
    assert_eq!((f.agents.n_valid(), f.map.n_valid()), (na, nm));
    let g = Graph::new();
    bb.encode_scene(&g, &store, &f.agents, &f.map).unwrap();
    let expect = 2 * interleaved_round_pairs(na, nm) + 2 * alltoken_round_pairs(na, nm);
    assert_eq!(g.score_entries(), expect);
}
