use opd_core::heads::HeadKind;
use opd_core::synth::{generate, SynthConfig};
use opd_core::trainer::{train, AlignmentModel, TrainConfig};

#[test]
fn dbg_loss_trajectory() {
    let data = generate(&SynthConfig {
        clusters: 5, phrases_per_cluster: 4, train_regions: 400, test_regions: 80,
        regions_per_image: 8, region_dim: 12, phrase_dim: 10, latent_dim: 8,
        common_clusters: 2, seed: 7, ..SynthConfig::default()
    });
    let config = TrainConfig {
        head: HeadKind::SimNet, embed_dims: vec![8, 6], stage_width: 8,
        learning_rate: 0.05, steps: 500, budget: 5, seed: 42,
        joint_after: Some(250), ..TrainConfig::default()
    };
    let mut model = AlignmentModel::initialize(&data.train, &data.regions, &data.phrases, &config).unwrap();
    let out = train(&mut model, &data.train, &data.regions, &data.phrases, None, &config).unwrap();
    for c in 0..10 {
        let w: f64 = out.history[c*50..(c+1)*50].iter().sum::<f64>() / 50.0;
        println!("steps {:3}-{:3}: mean loss {:.4}", c*50, (c+1)*50, w);
    }
}
