//! The evaluation toolbox: patch accuracy, PR-AUC, lesion-size slide
//! classes, pN staging over 5-slide patients, and weighted kappa.
//!
//! ```text
//! cargo run --example metrics
//! ```

use tileseg::eval::{
    kappa, patch_accuracy, pn_stage, pr_auc, slide_class, LesionCalibration, SlideClass,
};
use tileseg::featuremap::CellLabel;

fn main() {
    // patch-level metrics over (probability, truth) pairs
    let cells = [
        (0.92, CellLabel::Tumor),
        (0.81, CellLabel::Tumor),
        (0.47, CellLabel::Tumor), // missed
        (0.12, CellLabel::Normal),
        (0.55, CellLabel::Normal), // false call
        (0.03, CellLabel::Normal),
        (0.99, CellLabel::Ignore), // nolabel: excluded from both metrics
    ];
    let acc = patch_accuracy(cells.iter().copied()).unwrap();
    let (scores, labels): (Vec<f64>, Vec<bool>) = cells
        .iter()
        .filter(|(_, l)| *l != CellLabel::Ignore)
        .map(|&(p, l)| (p, l == CellLabel::Tumor))
        .unzip();
    let auc = pr_auc(&scores, &labels).unwrap();
    println!("patch accuracy = {acc:.3}   pr-auc = {auc:.3}");

    // slide class from the largest predicted lesion extent
    let cal = LesionCalibration::new(0.5); // 0.5 mm per map cell
    let lesions: Vec<(u32, u32)> = vec![(3, 3), (3, 4), (3, 5), (4, 4), (9, 9)];
    let class = slide_class(&lesions, &cal).unwrap();
    println!(
        "lesion of {} cells at 0.5 mm/cell -> slide class {:?}",
        lesions.len(),
        class
    );

    // a patient is five slides; staging follows the lesion-class rule table
    let patient = [
        class,
        SlideClass::Negative,
        SlideClass::Itc,
        SlideClass::Negative,
        SlideClass::Negative,
    ];
    let stage = pn_stage(&patient).unwrap();
    println!("patient slides {patient:?} -> {}", stage.as_str());

    // agreement between predicted and true stages, quadratically weighted
    let truth = vec![stage, stage, tileseg::eval::PnStage::Pn0, stage];
    let pred_perfect = truth.clone();
    let pred_constant = vec![tileseg::eval::PnStage::Pn0; 4];
    println!(
        "kappa: perfect = {:.3}, constant-prediction = {:.3}",
        kappa(&pred_perfect, &truth).unwrap(),
        kappa(&pred_constant, &truth).unwrap()
    );
}
