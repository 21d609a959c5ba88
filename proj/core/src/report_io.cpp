#include <fstream>
#include <stdexcept>

#include "img2st/format.hpp"
#include "img2st/training.hpp"

namespace img2st {

void write_train_log_csv(const std::string& path, const TrainLog& log) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path);
    out << "epoch,l_reg,l_contrast,l_total,lr,seconds\n";
    for (const auto& e : log.epochs) {
        out << e.epoch << ',' << fmt_g(e.l_reg) << ',' << fmt_g(e.l_contrast) << ','
            << fmt_g(e.l_total) << ',' << fmt_g(e.lr) << ',' << fmt_g(e.seconds) << "\n";
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace img2st
