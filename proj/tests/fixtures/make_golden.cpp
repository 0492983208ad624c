// Writes golden_v1.qlmq: a tiny packed 2-2-8 dynamic-scaling student.
#include <cstdio>

#include "qgpt/io/checkpoint.hpp"

int main(int argc, char** argv) {
    using namespace qgpt;
    if (argc != 2) {
        std::fprintf(stderr, "usage: %s OUT\n", argv[0]);
        return 2;
    }
    auto t = model::GptModel<float>::init_random(model::ModelConfig{64, 1, 8, 2, 16, 8, true}, 11);
    auto s = model::init_student_from_teacher(t, quant::BitSpec{2, 2, 8}, quant::Scheme::dynamic);
    float lo = -1.0f;
    for (auto& q : s.act_quantizers()) {
        q.range = {true, lo, 2.0f};
        lo -= 0.25f;
    }
    io::save_checkpoint(s, argv[1]);
    return 0;
}
