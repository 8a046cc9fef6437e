// Diagnostic: decompose eval accuracy by head (f_s vs f_t) and mode.
use magnet_da::autodiff::{Mode, Tape};
use magnet_da::data::{generate_shapes, Dataset, Domain, DomainPair};
use magnet_da::network::{MagnetModel, NetworkConfig, TransitionType};
use magnet_da::train::{train, Method, TrainConfig};

fn acc_by(model: &mut MagnetModel, ds: &Dataset, labels: &[u16], mode: Mode, use_ft: bool) -> f64 {
    let mut correct = 0;
    let n = ds.len();
    for chunk in (0..n).collect::<Vec<_>>().chunks(64) {
        let mut data = Vec::new();
        for &i in chunk { data.extend_from_slice(ds.image(i)); }
        let batch = magnet_da::tensor::Tensor::from_vec(vec![chunk.len(), 1, 32, 32], data).unwrap();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch, mode).unwrap();
        let probs = if use_ft { tape.value(out.ft_probs) } else { tape.value(out.fs_logits) };
        let c = 6;
        for (row, &i) in chunk.iter().enumerate() {
            let r = &probs.data()[row * c..(row + 1) * c];
            let arg = r.iter().enumerate().fold((0, f64::MIN), |a, (j, &v)| if v > a.1 { (j, v) } else { a }).0;
            if arg == labels[i] as usize { correct += 1; }
        }
    }
    correct as f64 / n as f64
}

fn main() {
    let network = NetworkConfig {
        num_blocks: 2, layers_per_block: 2, growth_rate: 4, stem_channels: 8,
        tap_fc_dim: 16, transition_type: TransitionType::A,
        ..NetworkConfig::new(1, 32, 6)
    };
    let cfg = TrainConfig {
        base_lr: 0.02, iterations: 2000, batch_size: 8, eval_stride: 100000,
        lambda_mmd: 1.0, gamma_entropy: 0.1, log_stride: 500, seed: 0,
        ..TrainConfig::default()
    };
    let cad = generate_shapes(Domain::Cad, 6, 1200, 32, 42).unwrap();
    let photo = generate_shapes(Domain::Photo, 6, 1200, 32, 42).unwrap();
    let cad_labels = cad.labels.clone().unwrap();
    let photo_labels = photo.labels.clone().unwrap();
    let pair = DomainPair::new(cad.clone(), photo.clone()).unwrap();
    let mut model = MagnetModel::new(network, 0).unwrap();
    train(&mut model, &pair, &cfg).unwrap();

    for (name, ds, labels) in [("source(cad)", &cad, &cad_labels), ("target(photo)", &photo, &photo_labels)] {
        let ft_eval = acc_by(&mut model, ds, labels, Mode::Eval, true);
        let fs_eval = acc_by(&mut model, ds, labels, Mode::Eval, false);
        let ft_train = acc_by(&mut model, ds, labels, Mode::Train, true);
        let fs_train = acc_by(&mut model, ds, labels, Mode::Train, false);
        println!("{name}: ft_eval={ft_eval:.3} fs_eval={fs_eval:.3} ft_train={ft_train:.3} fs_train={fs_train:.3}");
    }
    let _ = Method::Magnet;
}
