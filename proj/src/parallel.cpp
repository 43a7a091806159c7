#include "logicirc/parallel.hpp"

#include <cstdlib>
#include <stdexcept>
#include <string>

namespace logicirc {

int worker_count() {
    if (const char* env = std::getenv("LOGICIRC_WORKERS")) {
        char* end = nullptr;
        const long n = std::strtol(env, &end, 10);
        if (end == env || *end != '\0' || n < 1 || n > 1024)
            throw std::invalid_argument("LOGICIRC_WORKERS must be a positive integer, got '" + std::string(env) + "'");
        return static_cast<int>(n);
    }
    return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

}  // namespace logicirc
