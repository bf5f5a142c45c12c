//! Diagnostic: how much does each direction's loss depend on conditioning?
//! Compares velocity loss with (a) true condition tokens, (b) condition
//! tokens from a mismatched sample, (c) zeroed condition tokens.

use paintflow::backbone::{bind_params, encode_condition_nodes, predict_velocity_nodes, TaskDirection};
use paintflow::checkpoint::load_checkpoint;
use paintflow::codec::encode;
use paintflow::dataset::generate_corpus;
use paintflow::flow::{interpolate, velocity_target};
use paintflow::graph::Graph;
use paintflow::image::PixelImage;
use paintflow::rng::{fill_normal, stream_rng, uniform_f32, Stream};
use paintflow::tensor::Tensor;

fn main() {
    let path = std::env::args().nth(1).unwrap_or_else(|| "/tmp/refrun/ref_final.unim".into());
    let ckpt = load_checkpoint(&path).expect("checkpoint");
    let corpus = generate_corpus(200, 1, &ckpt.canvas).expect("corpus");
    let mut rng = stream_rng(555, Stream::Sample);

    for direction in [TaskDirection::Understanding, TaskDirection::Generation] {
        let mut true_loss = 0.0f64;
        let mut wrong_loss = 0.0f64;
        let mut zero_loss = 0.0f64;
        let n = 40;
        for i in 0..n {
            let sample = &corpus.samples[i];
            let other = &corpus.samples[(i + 37) % corpus.len()];
            let (target_img, cond_img, wrong_img): (&PixelImage, &PixelImage, &PixelImage) = match direction {
                TaskDirection::Understanding => (&sample.painted.image, &sample.rgb, &other.rgb),
                TaskDirection::Generation => (&sample.rgb, &sample.painted.image, &other.painted.image),
            };
            let z0 = encode(target_img, &ckpt.codec).unwrap();
            let (tokens, channels) = (z0.tokens(), z0.channels());
            let mut z1 = Tensor::zeros(&[tokens, channels]);
            fill_normal(&mut rng, z1.data_mut());
            let t = 0.2 + 0.6 * uniform_f32(&mut rng);
            let z_t = interpolate(&z0.data, &z1, t).unwrap().z_t;
            let target = velocity_target(&z0.data, &z1).unwrap();

            let loss_with = |img: Option<&PixelImage>| -> f64 {
                let mut g = Graph::new();
                let ids = bind_params(&mut g, &ckpt.params, false);
                let cond = match img {
                    Some(img) => {
                        encode_condition_nodes(&mut g, &ckpt.params, &ids, &ckpt.model, &ckpt.canvas, &[img], &[direction])
                            .unwrap()
                    }
                    None => {
                        let zeros = Tensor::zeros(&[ckpt.model.cond_tokens + 1, ckpt.model.width]);
                        g.input(zeros)
                    }
                };
                let v = predict_velocity_nodes(&mut g, &ckpt.params, &ids, &ckpt.model, z_t.clone(), &[t], cond).unwrap();
                let l = g.mse_loss(v, target.clone());
                g.value(l).data()[0] as f64
            };
            true_loss += loss_with(Some(cond_img));
            wrong_loss += loss_with(Some(wrong_img));
            zero_loss += loss_with(None);
        }
        println!(
            "{:?}: true {:.4} | mismatched {:.4} | zeroed {:.4}",
            direction,
            true_loss / n as f64,
            wrong_loss / n as f64,
            zero_loss / n as f64
        );
    }
}
