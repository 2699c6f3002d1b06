#include "comet/threading.hpp"

#include <atomic>
#include <condition_variable>
#include <mutex>
#include <thread>
#include <utility>
#include <vector>

namespace comet {
namespace {

std::atomic<int> g_threads{0};  // 0 = not yet resolved

int resolve_default() {
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  if (hw > 8) hw = 8;
  return static_cast<int>(hw);
}

// Persistent pool of helper threads; the caller runs the first chunk and
// helpers claim the rest one at a time under the mutex. Only one run() is
// active at a time (concurrent callers fall back to inline execution).
class Pool {
 public:
  static Pool& instance() {
    static Pool p;
    return p;
  }

  bool try_acquire() { return !busy_.exchange(true); }
  void release() { busy_.store(false); }

  void run(int workers, std::int64_t n,
           const std::function<void(std::int64_t, std::int64_t)>& fn) {
    ensure(workers - 1);
    const std::int64_t per = (n + workers - 1) / workers;
    std::unique_lock<std::mutex> lk(m_);
    ranges_.clear();
    for (std::int64_t b = 0; b < n; b += per)
      ranges_.emplace_back(b, std::min<std::int64_t>(b + per, n));
    fn_ = &fn;
    next_ = 1;
    pending_ = static_cast<int>(ranges_.size()) - 1;
    ++gen_;
    lk.unlock();
    cv_.notify_all();
    fn(ranges_[0].first, ranges_[0].second);
    lk.lock();
    done_cv_.wait(lk, [&] { return pending_ == 0; });
    fn_ = nullptr;
  }

 private:
  Pool() = default;
  ~Pool() {
    {
      std::lock_guard<std::mutex> lk(m_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  void ensure(int helpers) {
    std::lock_guard<std::mutex> lk(m_);
    while (static_cast<int>(threads_.size()) < helpers)
      threads_.emplace_back([this] { worker(); });
  }

  void worker() {
    std::uint64_t seen = 0;
    std::unique_lock<std::mutex> lk(m_);
    while (true) {
      cv_.wait(lk, [&] { return stop_ || gen_ != seen; });
      if (stop_) return;
      seen = gen_;
      while (fn_ != nullptr && next_ < static_cast<int>(ranges_.size())) {
        const auto [b, e] = ranges_[static_cast<std::size_t>(next_++)];
        const auto* fn = fn_;
        lk.unlock();
        (*fn)(b, e);
        lk.lock();
        if (--pending_ == 0) done_cv_.notify_all();
      }
    }
  }

  std::mutex m_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  std::vector<std::thread> threads_;
  std::vector<std::pair<std::int64_t, std::int64_t>> ranges_;
  const std::function<void(std::int64_t, std::int64_t)>* fn_ = nullptr;
  int next_ = 0;
  int pending_ = 0;
  std::uint64_t gen_ = 0;
  bool stop_ = false;
  std::atomic<bool> busy_{false};
};

}  // namespace

void set_math_threads(int n) { g_threads.store(n < 1 ? 1 : n); }

int math_threads() {
  int n = g_threads.load();
  if (n == 0) {
    n = resolve_default();
    g_threads.store(n);
  }
  return n;
}

void parallel_for(std::int64_t n,
                  const std::function<void(std::int64_t, std::int64_t)>& fn) {
  if (n <= 0) return;
  const int workers = math_threads();
  if (workers <= 1 || n < 2) {
    fn(0, n);
    return;
  }
  Pool& pool = Pool::instance();
  if (!pool.try_acquire()) {
    fn(0, n);  // nested or concurrent call: run inline
    return;
  }
  pool.run(std::min<int>(workers, static_cast<int>(n)), n, fn);
  pool.release();
}

}  // namespace comet
