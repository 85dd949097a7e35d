import { defineConfig } from "vite";

export default defineConfig({
  build: { outDir: "dist" },
  test: {
    environment: "jsdom",
    testTimeout: 60000,
    hookTimeout: 60000,
    // integration tests spawn one gateway process; run files sequentially
    fileParallelism: false,
  },
});
