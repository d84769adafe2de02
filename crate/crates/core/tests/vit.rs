use tobo_core::imaging::Image;
use tobo_core::rng::{substream, Stream};
use tobo_core::tensor::{Graph, ParamStore};
use tobo_core::vit::{patchify, Encoder, EncoderConfig, TransformerBlock};

fn encoder<T: tobo_core::tensor::Scalar>(cfg: &EncoderConfig, seed: u64) -> (Encoder, ParamStore<T>) {
    let mut store = ParamStore::new();
    let enc = Encoder::new(cfg.clone(), &mut store, &mut substream(seed, Stream::Weights, 0)).unwrap();
    (enc, store)
}

fn noise_image(size: usize, seed: u64) -> Image {
    use rand::Rng;
    let mut rng = substream(seed, Stream::Data, 0);
    Image::new(size, size, (0..3 * size * size).map(|_| rng.random::<f32>()).collect()).unwrap()
}

#[test]
fn permuting_pairs_permutes_spatial_outputs_exactly() {
    let cfg = EncoderConfig::desk();
    let (enc, store) = encoder::<f32>(&cfg, 1);
    let ps = patchify(&noise_image(32, 2), cfg.patch_size).unwrap();
    let positions = vec![5, 60, 17, 0, 33, 41, 8];
    let perm = [3, 0, 6, 1, 5, 2, 4];
    let permuted: Vec<usize> = perm.iter().map(|&i| positions[i]).collect();

    let a = enc.encode(&store, &ps.select(&positions).unwrap(), &positions).unwrap();
    let b = enc.encode(&store, &ps.select(&permuted).unwrap(), &permuted).unwrap();
    assert_eq!(a.cls, b.cls);
    for (j, &i) in perm.iter().enumerate() {
        assert_eq!(a.spatial.row(i), b.spatial.row(j));
    }
}

#[test]
fn batched_forward_matches_single_encodes() {
    let cfg = EncoderConfig::tiny();
    let (enc, store) = encoder::<f64>(&cfg, 4);
    let imgs = [noise_image(16, 5), noise_image(16, 6)];
    let pos = [vec![1, 7, 2], vec![15, 0, 9]];
    let mut flat = Vec::new();
    for (img, p) in imgs.iter().zip(&pos) {
        flat.extend(patchify(img, 4).unwrap().select(p).unwrap().into_iter().map(f64::from));
    }
    let mut g = Graph::new();
    let x = g.input(vec![6, cfg.patch_dim()], flat).unwrap();
    let all_pos: Vec<usize> = pos.concat();
    let out = enc.forward(&mut g, &store, x, &all_pos, 2).unwrap();
    let spatial = g.tensor(out.spatial);
    let cls = g.tensor(out.cls.unwrap());
    for b in 0..2 {
        let single = enc
            .encode(
                &store,
                &patchify(&imgs[b], 4).unwrap().select(&pos[b]).unwrap(),
                &pos[b],
            )
            .unwrap();
        for i in 0..3 {
            for (u, v) in spatial.row(b * 3 + i).iter().zip(single.spatial.row(i)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        for (u, v) in cls.row(b).iter().zip(single.cls.as_ref().unwrap()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn excluded_pixels_have_no_influence() {
    let cfg = EncoderConfig::desk();
    let (enc, store) = encoder::<f32>(&cfg, 7);
    let img = noise_image(32, 8);
    let positions = [0, 9, 18, 27, 36, 45, 54];
    let a = enc
        .encode(
            &store,
            &patchify(&img, 4).unwrap().select(&positions).unwrap(),
            &positions,
        )
        .unwrap();
    let mut perturbed = img.clone();
    // Pixel (1, 5) lies in patch 1, which is not supplied.
    perturbed.set_pixel(1, 5, [1.0, 0.0, 1.0]);
    let b = enc
        .encode(
            &store,
            &patchify(&perturbed, 4).unwrap().select(&positions).unwrap(),
            &positions,
        )
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn single_token_block_is_finite() {
    let mut store = ParamStore::<f64>::new();
    let block = TransformerBlock::new(&mut store, "b", 8, 2, 4, &mut substream(0, Stream::Weights, 0)).unwrap();
    let mut g = Graph::new();
    let x = g
        .input(vec![1, 8], (0..8).map(|i| i as f64 / 8.0 - 0.4).collect())
        .unwrap();
    let y = block.forward(&mut g, &store, x, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 8]);
    assert!(g.value(y).iter().all(|v| v.is_finite()));
}

#[test]
fn block_rejects_wrong_width() {
    let mut store = ParamStore::<f64>::new();
    let block = TransformerBlock::new(&mut store, "b", 8, 2, 4, &mut substream(0, Stream::Weights, 0)).unwrap();
    let mut g = Graph::new();
    let x = g.input(vec![2, 6], vec![0.1; 12]).unwrap();
    assert!(block.forward(&mut g, &store, x, 1).is_err());
}

#[test]
fn zero_output_projections_make_block_identity() {
    let mut store = ParamStore::<f64>::new();
    let block = TransformerBlock::new(&mut store, "b", 8, 2, 4, &mut substream(1, Stream::Weights, 0)).unwrap();
    for id in block.branch_outputs() {
        let n = store.get(id).len();
        store.set_data(id, vec![0.0; n]).unwrap();
    }
    let mut g = Graph::new();
    let data: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5).collect();
    let x = g.input(vec![3, 8], data.clone()).unwrap();
    let y = block.forward(&mut g, &store, x, 1).unwrap();
    assert_eq!(g.value(y), &data[..]);
}

#[test]
fn one_head_two_tokens_matches_hand_computation() {
    let mut store = ParamStore::<f64>::new();
    let block = TransformerBlock::new(&mut store, "b", 2, 1, 1, &mut substream(0, Stream::Weights, 0)).unwrap();
    for name in ["q", "k", "v", "out"] {
        let id = store.id(&format!("b.attn.{name}.weight")).unwrap();
        store.set_data(id, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    }
    // Scale the value path so the hand result is not symmetric in the tokens.
    let v = store.id("b.attn.v.weight").unwrap();
    store.set_data(v, vec![2.0, 0.0, 0.0, 0.5]).unwrap();
    for id in block.branch_outputs().into_iter().skip(2) {
        let n = store.get(id).len();
        store.set_data(id, vec![0.0; n]).unwrap();
    }

    let x = [[2.0, 0.0], [0.0, 3.0]];
    let ln = |r: [f64; 2]| {
        let m = (r[0] + r[1]) / 2.0;
        let var = ((r[0] - m).powi(2) + (r[1] - m).powi(2)) / 2.0;
        let s = (var + 1e-6).sqrt();
        [(r[0] - m) / s, (r[1] - m) / s]
    };
    let h = [ln(x[0]), ln(x[1])];
    let dot = |a: [f64; 2], b: [f64; 2]| a[0] * b[0] + a[1] * b[1];
    let mut expected = Vec::new();
    for i in 0..2 {
        let s: Vec<f64> = (0..2).map(|j| dot(h[i], h[j]) / 2f64.sqrt()).collect();
        let z = s[0].exp() + s[1].exp();
        let p = [s[0].exp() / z, s[1].exp() / z];
        for c in 0..2 {
            let scale = if c == 0 { 2.0 } else { 0.5 };
            expected.push(x[i][c] + scale * (p[0] * h[0][c] + p[1] * h[1][c]));
        }
    }

    let mut g = Graph::new();
    let xv = g.input(vec![2, 2], vec![2.0, 0.0, 0.0, 3.0]).unwrap();
    let y = block.forward(&mut g, &store, xv, 1).unwrap();
    for (a, b) in g.value(y).iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}
