use nalgebra::Vector3;
use surfmap_core::geometry::{bilinear_tap, compose_posmap, sample_bilinear, Grid};
use surfmap_core::synthgen::{make_instance, rasterize, InstanceSpec, SynthConfig};

fn main() {
    let config = SynthConfig { n_instances: 2, n_views: 24, ..SynthConfig::default() };
    let spec = config.instance_spec(0);
    let (mesh, gt_posmap) = make_instance(&spec, config.sphere_resolution, 64).unwrap();
    let sphere = InstanceSpec { amplitude: 0.0, ..spec };
    let (_, avg) = make_instance(&sphere, 16, 64).unwrap();
    let cam1 = config.camera(0).unwrap();
    let cam2 = config.camera(1).unwrap();
    let o1 = rasterize(&mesh, &cam1, &cam1.forward()).unwrap();
    let o2 = rasterize(&mesh, &cam2, &cam2.forward()).unwrap();
    let mut res = Grid::<3>::zeros(64, 64);
    for (r, (a, b)) in res.data_mut().iter_mut().zip(gt_posmap.grid().data().iter().zip(avg.grid().data())) {
        for c in 0..3 { r[c] = a[c] - b[c]; }
    }
    let pm1 = compose_posmap(&res, &avg).unwrap();
    let mut terms: Vec<(f64, usize, usize, [f64;2], [f64;2], f64)> = Vec::new();
    for (row, col) in o1.mask.foreground() {
        let a = o1.gt_uv.get(row, col);
        let p3 = sample_bilinear(pm1.grid(), a[0], a[1]);
        let Some(pg) = cam2.project(&Vector3::new(p3[0], p3[1], p3[2])) else { continue };
        let q3 = sample_bilinear(avg.grid(), a[0], a[1]);
        let Some(pga) = cam2.project(&Vector3::new(q3[0], q3[1], q3[2])) else { continue };
        if pg.depth - pga.depth > 0.05 { continue; }
        let gx = (pg.pixel.x - 0.5) / 63.0;
        let gy = (pg.pixel.y - 0.5) / 63.0;
        if !(0.0..=1.0).contains(&gx) || !(0.0..=1.0).contains(&gy) { continue; }
        let (b, tap) = bilinear_tap(&o2.gt_uv, gx, gy);
        let r1 = (tap.row0 + 1).min(63); let c1 = (tap.col0 + 1).min(63);
        if !(o2.mask.get(tap.row0, tap.col0) && o2.mask.get(tap.row0, c1) && o2.mask.get(r1, tap.col0) && o2.mask.get(r1, c1)) { continue; }
        let du = a[0] - b[0];
        let d = [du - du.round(), a[1] - b[1]];
        let t = d[0]*d[0] + d[1]*d[1];
        terms.push((t, row, col, a, b, pg.depth - pga.depth));
    }
    terms.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    let total: f64 = terms.iter().map(|t| t.0).sum();
    println!("kept {} mean {:.6}", terms.len(), total / terms.len() as f64);
    for t in terms.iter().take(15) {
        println!("term {:.4} at ({},{}) uv1 ({:.3},{:.3}) uvb ({:.3},{:.3}) zgap {:.4}", t.0, t.1, t.2, t.3[0], t.3[1], t.4[0], t.4[1], t.5);
    }
    let top50: f64 = terms.iter().take(50).map(|t| t.0).sum();
    println!("top-50 share: {:.1}%", 100.0 * top50 / total);
}
