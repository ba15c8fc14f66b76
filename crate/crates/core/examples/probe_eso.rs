use oarseg_core::dataset::class_pixel_distribution;
use oarseg_core::organs::OrganId;
use oarseg_core::phantom::generate_phantom_dataset;

fn main() {
    let data = generate_phantom_dataset(801, 8, (16, 32, 32)).unwrap();
    let vols: Vec<_> = data.iter().map(|(_, lv, _)| lv.clone()).collect();
    let d = class_pixel_distribution(&vols).unwrap();
    for organ in OrganId::ALL {
        println!("{}: fraction {:.5}", organ.name(), d.fraction(organ));
    }
    // esophagus HU stats and neighborhood
    let (ct, lv, geo) = &data[0];
    let (s, h, w) = ct.shape();
    let mut eso_hu = Vec::new();
    for z in 0..s { for y in 0..h { for x in 0..w {
        if lv.labels[[z, y, x]] == 6 { eso_hu.push(ct.voxels[[z, y, x]]); }
    }}}
    println!("p000 esophagus voxels: {} HU range {:?}..{:?}", eso_hu.len(), eso_hu.iter().min(), eso_hu.iter().max());
    for (o, st) in &geo.structures {
        if *o == OrganId::Esophagus { println!("{:?}", st); }
    }
    // per-slice count on p000
    for z in 0..s {
        let c = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).filter(|&(y, x)| lv.labels[[z, y, x]] == 6).count();
        print!("{c} ");
    }
    println!();
}
