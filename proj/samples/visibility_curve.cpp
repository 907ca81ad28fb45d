// Fringe visibility against cooling-laser drive for the two-level model and
// for two repumper strengths. Prints a whitespace-separated table.
#include <ionfringe/bloch.hpp>

#include <cstdio>

using namespace ionfringe;
using namespace ionfringe::bloch;

int main() {
    const AtomLevels ca = AtomLevels::calcium40();
    LaserField cooling;
    cooling.detuning = -two_pi * 10e6;
    LaserField strong, weak;
    strong.detuning = weak.detuning = two_pi * 60e6;
    strong.rabi = 60.0 * ca.gamma_pd;
    weak.rabi = 20.0 * ca.gamma_pd;

    std::printf("# omega397/gamma_ps  s397  v_two_level  v_repump60  v_repump20\n");
    for (int k = 0; k <= 40; ++k) {
        cooling.rabi = 0.25 * k * ca.gamma_ps;
        std::printf("%6.2f  %8.4f  %.6f  %.6f  %.6f\n", cooling.rabi / ca.gamma_ps, saturation_param(cooling, ca),
                    visibility_two_level(cooling, ca), visibility_three_level(cooling, strong, ca),
                    visibility_three_level(cooling, weak, ca));
    }
}
