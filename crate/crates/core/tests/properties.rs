use ndarray::{Array2, Array4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tryon_core::adapters::{attach_lora, count_params, merge_lora, LoraConfig};
use tryon_core::backbone::{forward, init_model, Conditioning, ModelConfig, TextStub};
use tryon_core::codec::{assemble_sequence, Codec, CodecParams, GarmentBlock, GarmentMode, LatentFrames, RowRole};
use tryon_core::conditioning::{guider_forward, guider_geometry, guider_strides, scaled_channels};
use tryon_core::efficiency::{build_report, estimate_flops, overhead_pct};
use tryon_core::flowmatch::{sample_path, standard_normal, TimeSampler};
use tryon_core::metrics::{perceptual_distance, ssim_video};
use tryon_core::pipeline::unpaired_mapping;
use tryon_core::VideoTensor;

fn random_video(seed: u64, dims: (usize, usize, usize, usize)) -> VideoTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VideoTensor::from_array(Array4::from_shape_fn(dims, |_| rng.random::<f32>()))
}

fn normal(shape: (usize, usize), std: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    standard_normal::<f64>(shape, rng) * std
}

fn tiny(width: usize, frames: usize, grid: usize, mode: GarmentMode) -> ModelConfig {
    ModelConfig {
        width,
        blocks: 1,
        heads: 2,
        frames,
        grid_h: grid,
        grid_w: grid,
        garment_mode: mode,
        guider_channels: scaled_channels(width),
        ..ModelConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn codec_round_trip(seed in any::<u64>(), f in 1usize..4, gh in 1usize..4, gw in 1usize..4, ps in prop::sample::select(vec![1usize, 2, 4])) {
        let codec = Codec::<f32>::new(CodecParams { patch_size: ps, width: 48, seed, ..CodecParams::default() }).unwrap();
        let v = random_video(seed, (f, 3, gh * ps, gw * ps));
        let z = codec.encode_video(&v).unwrap();
        prop_assert_eq!(z.rows.nrows(), f * gh * gw);
        prop_assert!(codec.decode_video(&z).unwrap().max_abs_diff(&v) <= 1e-5);
    }

    #[test]
    fn sequence_assembly_round_trip(seed in any::<u64>(), f in 1usize..4, p in 1usize..6, pooled in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mode = if pooled { GarmentMode::SinglePooled } else { GarmentMode::FrameBlock };
        let g_len = if pooled { 1 } else { p };
        let garment = GarmentBlock { rows: normal((g_len, 8), 1.0, &mut rng), mode };
        let pose = LatentFrames { rows: normal((f * p, 8), 1.0, &mut rng), frames: f, grid_h: 1, grid_w: p };
        let seq = assemble_sequence(&garment, &pose).unwrap();
        prop_assert_eq!(seq.len(), g_len + f * p);
        let (g2, p2) = seq.disassemble();
        prop_assert_eq!(g2, garment);
        prop_assert_eq!(p2, pose);
        let map = seq.index_map();
        prop_assert!(map[..g_len].iter().all(|r| matches!(r, RowRole::Garment(_))));
        for k in 0..f * p {
            prop_assert_eq!(map[g_len + k], RowRole::Video { frame: k / p, patch: k % p });
        }
    }

    #[test]
    fn guider_output_lands_on_the_token_grid(frames in 1usize..4, grid in 1usize..4, ps in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let cfg = ModelConfig { patch_size: ps, width: 16, heads: 2, frames, grid_h: grid, grid_w: grid + 1, guider_channels: scaled_channels(16), ..ModelConfig::default() };
        prop_assert_eq!(guider_strides(ps).unwrap().iter().product::<usize>(), ps);
        let geoms = guider_geometry(&cfg).unwrap();
        prop_assert_eq!(geoms.last().unwrap().out_voxels(), cfg.video_tokens());
        let model = init_model::<f32>(&cfg).unwrap();
        let (h, w) = (grid * ps, (grid + 1) * ps);
        let gf = guider_forward(&model, &random_video(1, (frames, 3, h, w)), &random_video(2, (frames, 1, h, w))).unwrap();
        prop_assert_eq!(gf.dim(), (cfg.video_tokens(), 16));
    }

    #[test]
    fn flops_grow_with_sequence_and_width(frames in 1usize..6, grid in 1usize..6, half_width in 2usize..24) {
        let d = 2 * half_width;
        let base = tiny(d, frames, grid, GarmentMode::FrameBlock);
        let f = |c: &ModelConfig| estimate_flops(c, true, Some(&LoraConfig { rank: 1, ..LoraConfig::default() })).unwrap().total();
        let reference = f(&base);
        let longer = f(&ModelConfig { frames: frames + 1, ..base.clone() });
        let wider_grid = f(&ModelConfig { grid_w: grid + 1, ..base.clone() });
        let wider = f(&ModelConfig { width: d + 2, ..base.clone() });
        prop_assert!(longer > reference);
        prop_assert!(wider_grid > reference);
        prop_assert!(wider > reference);
    }

    #[test]
    fn flops_are_additive(frames in 1usize..5, grid in 1usize..5, rank in 1usize..4, cross in any::<bool>()) {
        let cfg = tiny(16, frames, grid, GarmentMode::FrameBlock);
        let lora = LoraConfig { rank, cross_attention: cross, ..LoraConfig::default() };
        let all = estimate_flops(&cfg, true, Some(&lora)).unwrap();
        let b = estimate_flops(&cfg, false, None).unwrap().total();
        let g = estimate_flops(&cfg, true, None).unwrap().total() - b;
        let l = estimate_flops(&cfg, false, Some(&lora)).unwrap().total() - b;
        prop_assert_eq!(all.total(), b + g + l);
        let base = init_model::<f32>(&cfg).unwrap().base_only();
        let adapted = attach_lora(&init_model::<f32>(&cfg).unwrap(), &lora).unwrap();
        let r = build_report(&base, &adapted, None).unwrap();
        prop_assert_eq!(r.added_over_base_pct, overhead_pct(r.base_params as f64, r.total_params as f64));
        prop_assert_eq!(r.trainable_params, count_params(&adapted).trainable);
    }

    #[test]
    fn merge_matches_adapter_path(seed in any::<u64>(), pooled in any::<bool>()) {
        let mode = if pooled { GarmentMode::SinglePooled } else { GarmentMode::FrameBlock };
        let cfg = ModelConfig { seed, ..tiny(8, 2, 2, mode) };
        let mut model = attach_lora(&init_model::<f64>(&cfg).unwrap(), &LoraConfig { rank: 2, cross_attention: true, seed, ..LoraConfig::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let names: Vec<String> = model.params().keys().filter(|k| k.ends_with(".B")).cloned().collect();
        for n in names {
            let shape = model.param(&n).unwrap().dim();
            *model.param_mut(&n).unwrap() = normal(shape, 0.5, &mut rng);
        }
        let merged = merge_lora(&model);
        let x: Array2<f64> = normal((cfg.video_tokens(), 8), 1.0, &mut rng);
        let garment = GarmentBlock { rows: normal((cfg.garment_len(), 8), 1.0, &mut rng), mode };
        let pose = LatentFrames { rows: normal((cfg.video_tokens(), 8), 1.0, &mut rng), frames: 2, grid_h: 2, grid_w: 2 };
        let seq = assemble_sequence(&garment, &pose).unwrap();
        let text = TextStub::default_for(&cfg);
        let cond = Conditioning { sequence: &seq, text: &text, guider: None };
        let t = rng.random::<f64>();
        let a = forward(&model, &x, &cond, t).unwrap();
        let b = forward(&merged, &x, &cond, t).unwrap();
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!((&a - &b).iter().all(|d| d.abs() <= 1e-9 * scale.max(1.0)));
    }

    #[test]
    fn path_endpoints(seed in any::<u64>(), rows in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1: Array2<f64> = normal((rows, 3), 1.0, &mut rng);
        let p0 = sample_path(&x1, seed, TimeSampler::Fixed(0.0));
        prop_assert_eq!(&p0.x_t, &p0.x0);
        let p1 = sample_path(&x1, seed, TimeSampler::Fixed(1.0));
        prop_assert_eq!(&p1.x_t, &x1);
        prop_assert_eq!(p1.velocity, &x1 - &p1.x0);
    }

    #[test]
    fn metric_identities(a in any::<u64>(), b in any::<u64>()) {
        let (va, vb) = (random_video(a, (2, 3, 16, 16)), random_video(b, (2, 3, 16, 16)));
        prop_assert!((ssim_video(&va, &va).unwrap() - 1.0).abs() <= 1e-9);
        prop_assert!(perceptual_distance(&va, &va, 0).unwrap().abs() <= 1e-12);
        let (ab, ba) = (perceptual_distance(&va, &vb, 0).unwrap(), perceptual_distance(&vb, &va, 0).unwrap());
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
        prop_assert!(ab >= 0.0);
        let (sab, sba) = (ssim_video(&va, &vb).unwrap(), ssim_video(&vb, &va).unwrap());
        prop_assert!((sab - sba).abs() <= 1e-12);
    }

    #[test]
    fn unpaired_mapping_is_a_derangement(n in 2u32..12, seed in any::<u64>()) {
        let ids: Vec<u32> = (0..n).collect();
        let m = unpaired_mapping(&ids, seed).unwrap();
        prop_assert!(m.iter().all(|(k, v)| k != v));
        let mut image: Vec<u32> = m.values().copied().collect();
        image.sort_unstable();
        prop_assert_eq!(image, ids);
    }
}
