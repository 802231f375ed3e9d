#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace repalign {

/// Worker count: hardware concurrency, capped by REPALIGN_THREADS when set.
inline std::size_t worker_count() {
    std::size_t count = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("REPALIGN_THREADS"); env != nullptr && *env != '\0') {
        try {
            const long cap = std::stol(env);
            if (cap >= 1) {
                count = static_cast<std::size_t>(cap);
            }
        } catch (const std::exception&) {
        }
    }
    return count;
}

/// Runs body(i) for i in [0, count) over a static partition. Each index is
/// handled by exactly one worker, so results never depend on the worker count
/// as long as body(i) only writes to slot i.
template <typename Body>
void parallel_for(std::size_t count, Body&& body) {
    const std::size_t workers = std::min(worker_count(), count);
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) {
            body(i);
        }
        return;
    }

    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> threads;
    threads.reserve(workers);
    const std::size_t chunk = (count + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        threads.emplace_back([&, w] {
            const std::size_t begin = w * chunk;
            const std::size_t end = std::min(count, begin + chunk);
            try {
                for (std::size_t i = begin; i < end; ++i) {
                    body(i);
                }
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : threads) {
        t.join();
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

}  // namespace repalign
