//! Supervised contrastive loss with a memory queue, differentiated on the
//! tape.

use cgdet::numeric::{Tape, Tensor};
use cgdet::rcs::{build_sets, supcon_loss, MemoryQueue, RoiEmbedding, Source};

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn main() -> cgdet::Result<()> {
    // Two vehicles, one person; a queued vehicle and a queued bicycle.
    let batch = [[1.0, 0.2, 0.0], [0.9, 0.3, 0.1], [0.0, 1.0, 0.2]];
    let classes = [0, 0, 1];
    let mut queue = MemoryQueue::new(4);
    queue.push(&[
        RoiEmbedding { z: unit(&[1.0, 0.0, 0.1]), class_id: 0, source: Source::Queue },
        RoiEmbedding { z: unit(&[0.1, 0.1, 1.0]), class_id: 2, source: Source::Queue },
    ]);

    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_vec([3, 3], batch.concat())?);
    let z = tape.l2_normalize(x)?;
    let sets = build_sets(&classes, &queue);
    for tau in [0.07, 0.1, 0.5] {
        let loss = supcon_loss(&mut tape, z, &sets, &queue, tau)?;
        println!("tau {tau}: loss {:.4}", tape.value(loss).data()[0]);
    }
    let anchors = sets.positives.iter().filter(|p| !p.is_empty()).count();
    println!("{anchors} of {} anchors have positives", classes.len());
    Ok(())
}
