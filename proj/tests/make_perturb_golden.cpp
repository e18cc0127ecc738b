// Regenerates tests/fixtures/perturb_golden_{input,output}.mvct. Run once; the
// files are committed and the test compares against them.
#include <filesystem>
#include <iostream>

#include "ssmcond/aligner.hpp"
#include "ssmcond/tensor_io.hpp"

using namespace ssmcond;

int main(int argc, char **argv) {
    const std::filesystem::path dir = argc > 1 ? argv[1] : SSMCOND_FIXTURES;
    Rng rng(2025);
    Tensor logits(6, 5);
    for (double &v : logits.values())
        v = rng.uniform(-2.0, 2.0);
    // Perturb what the test will read back, i.e. the f32-rounded input.
    write_tensor(softmax_rows(logits), dir / "perturb_golden_input.mvct");
    const AlignmentMatrix alpha{read_tensor(dir / "perturb_golden_input.mvct")};
    Rng noise(10);
    const AlignmentMatrix out = perturb_alpha(alpha, 0.10, noise);
    write_tensor(out.alpha, dir / "perturb_golden_output.mvct");
    std::cout << "wrote " << (dir / "perturb_golden_output.mvct").string() << "\n";
    return 0;
}
