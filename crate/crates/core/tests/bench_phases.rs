use std::time::Instant;

// Reproduce backward phases standalone to see where dec0.c1-like time goes.
#[test]
#[ignore]
fn bench_phases() {
    let (ci, co, hw, k_side) = (24usize, 8usize, 128usize, 3usize);
    let k = ci * k_side * k_side; // 216
    let p = hw * hw; // 16384
    let cols: Vec<f32> = (0..k * p).map(|i| (i as f32 * 0.37).sin()).collect();
    let dout: Vec<f32> = (0..co * p).map(|i| (i as f32 * 0.11).cos()).collect();
    let w: Vec<f32> = (0..co * k).map(|i| (i as f32 * 0.05).sin()).collect();

    let reps = 10;
    // dW: dot per (co, k)
    let t0 = Instant::now();
    let mut sink = 0.0f32;
    for _ in 0..reps {
        let mut dw = vec![0.0f32; co * k];
        for c in 0..co {
            let g = &dout[c * p..(c + 1) * p];
            for ki in 0..k {
                let col = &cols[ki * p..(ki + 1) * p];
                let mut acc = [0.0f32; 8];
                let gc = g.chunks_exact(8);
                let cc = col.chunks_exact(8);
                for (av, bv) in gc.zip(cc) {
                    for l in 0..8 { acc[l] += av[l] * bv[l]; }
                }
                dw[c * k + ki] = acc.iter().sum();
            }
        }
        sink += dw[0];
    }
    let dw_t = t0.elapsed().as_secs_f64() / reps as f64;
    println!("dW  (seq dot8): {:6.2} ms ({:4.1} GF/s)", dw_t * 1e3, (2.0 * (co*k*p) as f64) / dw_t / 1e9);

    // dcol = W^T dout: axpy per (k, co)
    let t1 = Instant::now();
    for _ in 0..reps {
        let mut dcol = vec![0.0f32; k * p];
        for ki in 0..k {
            let row = &mut dcol[ki * p..(ki + 1) * p];
            for c in 0..co {
                let wk = w[c * k + ki];
                let g = &dout[c * p..(c + 1) * p];
                for (r, &gv) in row.iter_mut().zip(g) { *r += wk * gv; }
            }
        }
        sink += dcol[0];
    }
    let dcol_t = t1.elapsed().as_secs_f64() / reps as f64;
    println!("dcol (seq axpy): {:6.2} ms ({:4.1} GF/s)", dcol_t * 1e3, (2.0 * (co*k*p) as f64) / dcol_t / 1e9);

    // alloc+zero cost of the dcol buffer alone
    let t2 = Instant::now();
    for _ in 0..reps {
        let dcol = vec![0.0f32; k * p];
        sink += dcol[0];
    }
    println!("zeroing {:2} MB: {:6.2} ms", k * p * 4 / (1 << 20), t2.elapsed().as_secs_f64() / reps as f64 * 1e3);
    eprintln!("{sink}");
}
